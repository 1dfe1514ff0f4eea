//! Hashed term-count features.
//!
//! Text is tokenized into maximal alphanumeric runs, optionally
//! lowercased, and hashed (unigrams plus adjacent bigrams) into a
//! power-of-two bucket space with 64-bit FNV-1a. Collisions are accepted
//! silently, as in the standard hashing trick. The function is pure, so
//! index-side and query-side features always agree as long as the same
//! config is used; the config is embedded in every model file for that
//! reason.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Separator byte between the two tokens of a hashed bigram.
const BIGRAM_SEP: u8 = 0x1f;

/// Tokenizer and hashing parameters for [`featurize`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    /// Bucket count; must be a power of two and at least 2.
    pub num_buckets: u64,
    /// Hash adjacent-token bigrams in addition to unigrams.
    pub use_bigrams: bool,
    /// Lowercase tokens before hashing.
    pub lowercase: bool,
    /// XORed into the FNV initial state, so different seeds give
    /// different (but equally deterministic) bucket assignments.
    pub hash_seed: u64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            num_buckets: 1 << 18,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 0,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_buckets < 2 || !self.num_buckets.is_power_of_two() {
            return Err(Error::Argument(format!(
                "num_buckets must be a power of two >= 2, got {}",
                self.num_buckets
            )));
        }
        Ok(())
    }
}

/// Sparse term-count vector: strictly increasing bucket ids with
/// positive counts of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseFeatures {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut state = FNV_OFFSET ^ seed;
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

fn bucket_of(bytes: &[u8], config: &FeaturizerConfig) -> u32 {
    (fnv1a(bytes, config.hash_seed) & (config.num_buckets - 1)) as u32
}

/// Split into maximal alphanumeric runs, lowercasing if configured.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if lowercase {
        tokens = tokens.into_iter().map(|t| t.to_lowercase()).collect();
    }
    tokens
}

/// Map text to hashed term counts. Empty text yields empty features.
pub fn featurize(text: &str, config: &FeaturizerConfig) -> SparseFeatures {
    let tokens = tokenize(text, config.lowercase);
    let mut pairs: Vec<u32> = Vec::with_capacity(tokens.len() * 2);
    for token in &tokens {
        pairs.push(bucket_of(token.as_bytes(), config));
    }
    if config.use_bigrams {
        let mut buf = Vec::new();
        for pair in tokens.windows(2) {
            buf.clear();
            buf.extend_from_slice(pair[0].as_bytes());
            buf.push(BIGRAM_SEP);
            buf.extend_from_slice(pair[1].as_bytes());
            pairs.push(bucket_of(&buf, config));
        }
    }
    pairs.sort_unstable();

    let mut indices = Vec::new();
    let mut values = Vec::new();
    for bucket in pairs {
        if indices.last() == Some(&bucket) {
            *values.last_mut().unwrap() += 1.0;
        } else {
            indices.push(bucket);
            values.push(1.0);
        }
    }
    SparseFeatures { indices, values }
}
