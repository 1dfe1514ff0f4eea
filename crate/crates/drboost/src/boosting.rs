//! Sequential ensemble training and its baselines.
//!
//! Three drivers share one loop shape: train a model on negatives, score
//! the dev set, repeat while the dev error keeps improving.
//!
//! * [`run_boosting`] keeps every round's model, mining each round's
//!   negatives from the *ensemble's* retrieval distribution and training
//!   the new low-dimensional learner on hard negatives only. The
//!   ensemble scores by concatenated embeddings, so it drops into the
//!   same MIPS index machinery as a single model.
//! * [`run_iterative`] is the replace-instead-of-combine baseline: each
//!   round trains a fresh full-width model (with in-batch negatives) on
//!   negatives mined from the previous round's model.
//! * [`run_bagging`] trains independent models with different seeds and
//!   concatenates them, isolating the ensembling effect from the
//!   boosting effect.
//!
//! Rounds are inherently sequential; mining parallelizes over queries
//! with one derived RNG stream per query, so results are independent of
//! thread count.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{AugmentedExample, Corpus, TrainPair};
use crate::encoder::{self, EncoderModel, TrainConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::featurizer::{featurize, FeaturizerConfig, SparseFeatures};
use crate::index::{exact_search_rows, EmbeddingMatrix};
use crate::rng::{derive_seed, rng_for};

/// Which side of the bi-encoder an embedding is for. Passage-side
/// ensemble subvectors carry the component weights so that a single
/// inner product reproduces the weighted score sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Passage,
}

/// Ordered weak learners with combination weights.
///
/// Round 1 occupies the lowest indices of the concatenated vector; the
/// ensemble grows by appending. All components share one featurizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    components: Vec<(EncoderModel, f64)>,
}

impl Ensemble {
    pub const DEFAULT_ALPHA: f64 = 1.0;

    pub fn new(first: EncoderModel) -> Ensemble {
        Ensemble {
            components: vec![(first, Self::DEFAULT_ALPHA)],
        }
    }

    pub fn from_components(components: Vec<(EncoderModel, f64)>) -> Result<Ensemble> {
        if components.is_empty() {
            return Err(Error::Argument("ensemble needs at least one component".to_string()));
        }
        let mut it = components.into_iter();
        let (first, alpha) = it.next().unwrap();
        let mut ensemble = Ensemble::new(first);
        ensemble.components[0].1 = alpha;
        for (model, alpha) in it {
            ensemble.push_weighted(model, alpha)?;
        }
        Ok(ensemble)
    }

    /// Append a component with the default weight of 1.
    pub fn push(&mut self, model: EncoderModel) -> Result<()> {
        self.push_weighted(model, Self::DEFAULT_ALPHA)
    }

    pub fn push_weighted(&mut self, model: EncoderModel, alpha: f64) -> Result<()> {
        if !alpha.is_finite() {
            return Err(Error::Argument("alpha must be finite".to_string()));
        }
        if model.featurizer != self.components[0].0.featurizer {
            return Err(Error::Argument(
                "all ensemble components must share one featurizer config".to_string(),
            ));
        }
        self.components.push((model, alpha));
        Ok(())
    }

    pub fn components(&self) -> &[(EncoderModel, f64)] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn total_dim(&self) -> usize {
        self.components.iter().map(|(m, _)| m.dim).sum()
    }

    pub fn featurizer(&self) -> &FeaturizerConfig {
        &self.components[0].0.featurizer
    }

    /// The first `rounds` components as their own ensemble.
    pub fn prefix(&self, rounds: usize) -> Ensemble {
        assert!(rounds >= 1 && rounds <= self.len());
        Ensemble {
            components: self.components[..rounds].to_vec(),
        }
    }
}

/// Concatenated embedding of already-featurized text.
pub fn ensemble_embed_features(
    ensemble: &Ensemble,
    features: &SparseFeatures,
    side: Side,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(ensemble.total_dim());
    for (model, alpha) in ensemble.components() {
        let sub = model.embed_features_f64(features);
        match side {
            Side::Query => out.extend(sub.into_iter().map(|v| v as f32)),
            Side::Passage => out.extend(sub.into_iter().map(|v| (v * alpha) as f32)),
        }
    }
    out
}

/// Concatenated embedding of `text` for the given side.
pub fn ensemble_embed(ensemble: &Ensemble, text: &str, side: Side) -> Vec<f32> {
    ensemble_embed_features(ensemble, &featurize(text, ensemble.featurizer()), side)
}

/// Relevance as one inner product of concatenated vectors.
pub fn ensemble_score(ensemble: &Ensemble, query: &str, passage: &str) -> f32 {
    let q = ensemble_embed(ensemble, query, Side::Query);
    let p = ensemble_embed(ensemble, passage, Side::Passage);
    crate::index::dot(&q, &p)
}

/// Corpus passages featurized once, reusable across components and rounds.
pub struct CorpusFeatures {
    pub features: Vec<SparseFeatures>,
    pub row_ids: Vec<String>,
}

impl CorpusFeatures {
    pub fn build(corpus: &Corpus, featurizer: &FeaturizerConfig) -> CorpusFeatures {
        let features = corpus
            .passages()
            .par_iter()
            .map(|p| featurize(&p.full_text(), featurizer))
            .collect();
        CorpusFeatures {
            features,
            row_ids: corpus.iter().map(|p| p.id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Passage-side matrix for the whole ensemble (weighted concatenation).
pub fn ensemble_corpus_matrix(ensemble: &Ensemble, feats: &CorpusFeatures) -> EmbeddingMatrix {
    let total = ensemble.total_dim();
    let mut data = vec![0.0f32; feats.len() * total];
    data.par_chunks_mut(total)
        .zip(feats.features.par_iter())
        .for_each(|(row, f)| {
            let mut offset = 0;
            for (model, alpha) in ensemble.components() {
                for (d, v) in model.embed_features_f64(f).into_iter().enumerate() {
                    row[offset + d] = (v * alpha) as f32;
                }
                offset += model.dim;
            }
        });
    EmbeddingMatrix {
        num_rows: feats.len(),
        dim: total,
        data,
        row_ids: feats.row_ids.clone(),
    }
}

/// Convenience wrapper that featurizes the corpus first.
pub fn embed_corpus_ensemble(ensemble: &Ensemble, corpus: &Corpus) -> EmbeddingMatrix {
    let feats = CorpusFeatures::build(corpus, ensemble.featurizer());
    ensemble_corpus_matrix(ensemble, &feats)
}

/// Dev-set selection metric for the round loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevMetric {
    RecallAt(usize),
    MrrAt10,
}

impl DevMetric {
    pub fn depth(&self) -> usize {
        match self {
            DevMetric::RecallAt(k) => *k,
            DevMetric::MrrAt10 => 10,
        }
    }
}

impl fmt::Display for DevMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DevMetric::RecallAt(k) => write!(f, "r@{k}"),
            DevMetric::MrrAt10 => write!(f, "mrr@10"),
        }
    }
}

impl FromStr for DevMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_lowercase();
        if lower == "mrr@10" {
            return Ok(DevMetric::MrrAt10);
        }
        if let Some(k) = lower.strip_prefix("r@") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Argument(format!("bad metric '{s}'")))?;
            if k >= 1 {
                return Ok(DevMetric::RecallAt(k));
            }
        }
        Err(Error::Argument(format!(
            "unknown dev metric '{s}' (expected r@K or mrr@10)"
        )))
    }
}

/// Training mode for the round loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoostMode {
    Boost,
    Iterative,
    Bagging,
}

impl fmt::Display for BoostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoostMode::Boost => write!(f, "boost"),
            BoostMode::Iterative => write!(f, "iterative"),
            BoostMode::Bagging => write!(f, "bagging"),
        }
    }
}

impl FromStr for BoostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "boost" => Ok(BoostMode::Boost),
            "iterative" => Ok(BoostMode::Iterative),
            "bagging" => Ok(BoostMode::Bagging),
            other => Err(Error::Argument(format!("unknown mode '{other}'"))),
        }
    }
}

/// Round-loop settings shared by the three drivers.
#[derive(Debug, Clone)]
pub struct BoostConfig {
    pub featurizer: FeaturizerConfig,
    pub max_rounds: usize,
    /// Minimum dev-error reduction to keep adding rounds.
    pub tolerance: f64,
    /// Encoder width per round (the full width for iterative mode).
    pub dim_per_round: usize,
    /// Negatives attached to each example.
    pub negatives_n: usize,
    /// Candidate pool retrieved per query before sampling.
    pub mine_top_n: usize,
    pub mine_temperature: f64,
    pub dev_metric: DevMetric,
    pub mode: BoostMode,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            featurizer: FeaturizerConfig::default(),
            max_rounds: 5,
            tolerance: 0.001,
            dim_per_round: 8,
            negatives_n: 8,
            mine_top_n: 100,
            mine_temperature: 1.0,
            dev_metric: DevMetric::RecallAt(10),
            mode: BoostMode::Boost,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        if self.max_rounds < 1 {
            return Err(Error::Argument("max_rounds must be >= 1".to_string()));
        }
        if self.tolerance < 0.0 {
            return Err(Error::Argument("tolerance must be >= 0".to_string()));
        }
        if self.mine_top_n <= self.negatives_n {
            return Err(Error::Argument(format!(
                "mine_top_n ({}) must exceed negatives_n ({})",
                self.mine_top_n, self.negatives_n
            )));
        }
        if self.mine_temperature <= 0.0 {
            return Err(Error::Argument("mine_temperature must be > 0".to_string()));
        }
        if self.dim_per_round == 0 || self.negatives_n == 0 {
            return Err(Error::Argument("dims and negatives must be >= 1".to_string()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Candidate retrieval for negative mining
// ---------------------------------------------------------------------------

/// Anything that can produce a scored candidate pool for a query.
pub trait CandidateRetriever: Sync {
    /// Top `n` corpus rows by this retriever's score, ranked by the
    /// global tie-break rule.
    fn top_candidates(&self, query_text: &str, n: usize) -> Vec<(usize, f32)>;
}

/// Exact search against the ensemble's concatenated corpus matrix.
pub struct EnsembleRetriever<'a> {
    ensemble: &'a Ensemble,
    matrix: EmbeddingMatrix,
}

impl<'a> EnsembleRetriever<'a> {
    pub fn new(ensemble: &'a Ensemble, feats: &CorpusFeatures) -> Self {
        EnsembleRetriever {
            ensemble,
            matrix: ensemble_corpus_matrix(ensemble, feats),
        }
    }
}

impl CandidateRetriever for EnsembleRetriever<'_> {
    fn top_candidates(&self, query_text: &str, n: usize) -> Vec<(usize, f32)> {
        let q = ensemble_embed(self.ensemble, query_text, Side::Query);
        exact_search_rows(&self.matrix, &q, n).expect("dims agree by construction")
    }
}

/// Crude lexical scorer over shared unigram buckets, weighting each
/// shared bucket by squared inverse document frequency. Stands in for a
/// classic term-based retriever when seeding the iterative baseline.
pub struct LexicalRetriever {
    featurizer: FeaturizerConfig,
    /// bucket -> rows containing it
    postings: std::collections::HashMap<u32, Vec<u32>>,
    /// bucket -> idf^2
    idf_sq: std::collections::HashMap<u32, f32>,
    num_rows: usize,
}

impl LexicalRetriever {
    /// Index unigram buckets of every passage (bigrams off).
    pub fn build(corpus: &Corpus, featurizer: &FeaturizerConfig) -> LexicalRetriever {
        let unigram_config = FeaturizerConfig {
            use_bigrams: false,
            ..featurizer.clone()
        };
        let per_row: Vec<Vec<u32>> = corpus
            .passages()
            .par_iter()
            .map(|p| featurize(&p.full_text(), &unigram_config).indices)
            .collect();

        let mut postings: std::collections::HashMap<u32, Vec<u32>> =
            std::collections::HashMap::new();
        for (row, buckets) in per_row.iter().enumerate() {
            for &b in buckets {
                postings.entry(b).or_default().push(row as u32);
            }
        }
        let n = corpus.len() as f32;
        let idf_sq = postings
            .iter()
            .map(|(&b, rows)| {
                let idf = (1.0 + n / rows.len() as f32).ln();
                (b, idf * idf)
            })
            .collect();
        LexicalRetriever {
            featurizer: unigram_config,
            postings,
            idf_sq,
            num_rows: corpus.len(),
        }
    }
}

impl CandidateRetriever for LexicalRetriever {
    fn top_candidates(&self, query_text: &str, n: usize) -> Vec<(usize, f32)> {
        let query = featurize(query_text, &self.featurizer);
        let mut scores = vec![0.0f32; self.num_rows];
        for (bucket, _) in query.iter() {
            if let Some(rows) = self.postings.get(&bucket) {
                let w = self.idf_sq[&bucket];
                for &row in rows {
                    scores[row as usize] += w;
                }
            }
        }
        let scored: Vec<(usize, f32)> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .collect();
        crate::index::select_top_k(scored, n)
    }
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// Sample `n` indices from `pool` without replacement, proportional to
/// softmax(score / temperature), renormalizing after each draw.
fn softmax_sample_without_replacement(
    pool: &[(usize, f32)],
    n: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut remaining: Vec<(usize, f64)> = pool
        .iter()
        .map(|(row, s)| (*row, f64::from(*s) / temperature))
        .collect();
    let mut picked = Vec::with_capacity(n.min(remaining.len()));
    while picked.len() < n && !remaining.is_empty() {
        let max = remaining
            .iter()
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|(_, s)| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = remaining.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                chosen = i;
                break;
            }
            u -= w;
        }
        picked.push(remaining.remove(chosen).0);
    }
    picked
}

/// Uniform random distinct rows excluding `exclude`.
fn uniform_sample_excluding(
    num_rows: usize,
    n: usize,
    exclude: &HashSet<usize>,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let available = num_rows - exclude.len().min(num_rows);
    if available == 0 {
        return Vec::new();
    }
    if n >= available {
        return (0..num_rows).filter(|r| !exclude.contains(r)).collect();
    }
    let mut picked = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let row = rng.random_range(0..num_rows);
        if !exclude.contains(&row) && picked.insert(row) {
            out.push(row);
        }
    }
    out
}

fn positives_as_rows(pair: &TrainPair, corpus: &Corpus) -> Result<HashSet<usize>> {
    pair.positive_ids
        .iter()
        .map(|id| {
            corpus.row_of(id).ok_or_else(|| {
                Error::Validation(format!(
                    "query '{}' references unknown passage '{}'",
                    pair.query_id, id
                ))
            })
        })
        .collect()
}

/// Attach `n` uniformly sampled negatives to every pair.
pub fn initial_negatives(
    pairs: &[TrainPair],
    corpus: &Corpus,
    n: usize,
    seed: u64,
) -> Result<Vec<AugmentedExample>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let positives = positives_as_rows(pair, corpus)?;
            let mut rng = rng_for(seed, i as u64);
            let rows = uniform_sample_excluding(corpus.len(), n, &positives, &mut rng);
            let ids = rows.iter().map(|&r| corpus.get(r).id.clone()).collect();
            AugmentedExample::new(pair.clone(), ids, corpus)
        })
        .collect()
}

/// Mine hard negatives from a retriever's candidate pool.
///
/// For each pair: retrieve the top `mine_top_n` candidates, drop all
/// annotated positives, then sample `negatives_n` without replacement
/// from softmax(score / temperature). Pools that come up short are
/// padded with uniform random non-positive passages.
pub fn mine_negatives(
    retriever: &dyn CandidateRetriever,
    pairs: &[TrainPair],
    corpus: &Corpus,
    config: &BoostConfig,
    seed: u64,
) -> Result<Vec<AugmentedExample>> {
    config.validate()?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let positives = positives_as_rows(pair, corpus)?;
            let pool: Vec<(usize, f32)> = retriever
                .top_candidates(&pair.query_text, config.mine_top_n)
                .into_iter()
                .filter(|(row, _)| !positives.contains(row))
                .collect();

            let mut rng = rng_for(seed, i as u64);
            let mut rows = softmax_sample_without_replacement(
                &pool,
                config.negatives_n,
                config.mine_temperature,
                &mut rng,
            );
            if rows.len() < config.negatives_n {
                log::warn!(
                    "query '{}': candidate pool below {} negatives, padding with random passages",
                    pair.query_id,
                    config.negatives_n
                );
                let mut exclude = positives.clone();
                exclude.extend(rows.iter().copied());
                let pad = uniform_sample_excluding(
                    corpus.len(),
                    config.negatives_n - rows.len(),
                    &exclude,
                    &mut rng,
                );
                rows.extend(pad.into_iter().take(config.negatives_n - rows.len()));
            }
            let ids = rows.iter().map(|&r| corpus.get(r).id.clone()).collect();
            AugmentedExample::new(pair.clone(), ids, corpus)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Round loop drivers
// ---------------------------------------------------------------------------

/// One row of the training history TSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub dev_metric: f64,
    pub train_nll: f64,
}

/// Dev metric of an ensemble via exact search over its corpus matrix.
pub fn evaluate_ensemble(
    ensemble: &Ensemble,
    feats: &CorpusFeatures,
    dev: &[TrainPair],
    metric: DevMetric,
) -> Result<f64> {
    let matrix = ensemble_corpus_matrix(ensemble, feats);
    evaluate_matrix(ensemble, &matrix, dev, metric)
}

fn evaluate_matrix(
    ensemble: &Ensemble,
    matrix: &EmbeddingMatrix,
    dev: &[TrainPair],
    metric: DevMetric,
) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Argument("empty dev set".to_string()));
    }
    let k = metric.depth();
    let results: Vec<crate::index::SearchResult> = dev
        .par_iter()
        .map(|pair| {
            let q = ensemble_embed(ensemble, &pair.query_text, Side::Query);
            crate::index::exact_search(matrix, &q, k).expect("dims agree")
        })
        .collect();
    let golds: Vec<HashSet<String>> = dev
        .iter()
        .map(|p| p.positive_ids.iter().cloned().collect())
        .collect();
    match metric {
        DevMetric::RecallAt(k) => eval::recall_at_k(&results, &golds, k),
        DevMetric::MrrAt10 => eval::mrr_at_10(&results, &golds),
    }
}

fn round_train_config(base: &TrainConfig, cfg: &BoostConfig, round: usize) -> TrainConfig {
    TrainConfig {
        in_batch_negatives: match cfg.mode {
            BoostMode::Boost => false,
            BoostMode::Iterative | BoostMode::Bagging => true,
        },
        negatives_per_example: cfg.negatives_n,
        seed: derive_seed(cfg.seed, 0x1000 + round as u64),
        ..base.clone()
    }
}

/// Grow an ensemble round by round on its own retrieval mistakes.
///
/// Round 1 trains on uniform random negatives (the initial model is a
/// constant scorer, so its retrieval distribution is uninformative);
/// later rounds mine from the current ensemble. Stops when the dev
/// error improves by at most `tolerance` or `max_rounds` is reached,
/// and returns the prefix ensemble from the best round plus the full
/// history.
pub fn run_boosting(
    train: &[TrainPair],
    dev: &[TrainPair],
    corpus: &Corpus,
    boost_cfg: &BoostConfig,
    train_cfg: &TrainConfig,
) -> Result<(Ensemble, Vec<RoundRecord>)> {
    boost_cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Argument("empty dev set".to_string()));
    }
    let feats = CorpusFeatures::build(corpus, &boost_cfg.featurizer);

    let mut ensemble: Option<Ensemble> = None;
    let mut history: Vec<RoundRecord> = Vec::new();
    let mut err_old = f64::INFINITY;
    let mut err = 1.0;

    for round in 1..=boost_cfg.max_rounds {
        if round > 1 && (err_old - err) <= boost_cfg.tolerance {
            break;
        }
        let mine_seed = derive_seed(boost_cfg.seed, 2 * round as u64);
        let dev_mine_seed = derive_seed(boost_cfg.seed, 2 * round as u64 + 1);
        let (train_ex, dev_ex) = match &ensemble {
            None => (
                initial_negatives(train, corpus, boost_cfg.negatives_n, mine_seed)?,
                initial_negatives(dev, corpus, boost_cfg.negatives_n, dev_mine_seed)?,
            ),
            Some(current) => {
                let retriever = EnsembleRetriever::new(current, &feats);
                (
                    mine_negatives(&retriever, train, corpus, boost_cfg, mine_seed)?,
                    mine_negatives(&retriever, dev, corpus, boost_cfg, dev_mine_seed)?,
                )
            }
        };

        let cfg = round_train_config(train_cfg, boost_cfg, round);
        let outcome = encoder::train(
            &train_ex,
            &dev_ex,
            corpus,
            &boost_cfg.featurizer,
            boost_cfg.dim_per_round,
            &cfg,
            derive_seed(boost_cfg.seed, 0x2000 + round as u64),
        )?;

        match &mut ensemble {
            None => ensemble = Some(Ensemble::new(outcome.model)),
            Some(e) => e.push(outcome.model)?,
        }
        let current = ensemble.as_ref().unwrap();
        let metric = evaluate_ensemble(current, &feats, dev, boost_cfg.dev_metric)?;
        history.push(RoundRecord {
            round,
            dev_metric: metric,
            train_nll: outcome.final_train_nll,
        });
        err_old = err;
        err = 1.0 - metric;
    }

    let ensemble = ensemble.expect("max_rounds >= 1");
    let best_round = history
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (1.0 - a.dev_metric)
                .partial_cmp(&(1.0 - b.dev_metric))
                .unwrap()
        })
        .map(|(i, _)| i + 1)
        .unwrap();
    Ok((ensemble.prefix(best_round), history))
}

/// Replace-each-round baseline with in-batch negatives.
///
/// Round 1 seeds negatives from the lexical scorer; later rounds mine
/// from the previous round's model. Returns the best round's model.
pub fn run_iterative(
    train: &[TrainPair],
    dev: &[TrainPair],
    corpus: &Corpus,
    boost_cfg: &BoostConfig,
    train_cfg: &TrainConfig,
) -> Result<(EncoderModel, Vec<RoundRecord>)> {
    boost_cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Argument("empty dev set".to_string()));
    }
    let feats = CorpusFeatures::build(corpus, &boost_cfg.featurizer);
    let lexical = LexicalRetriever::build(corpus, &boost_cfg.featurizer);

    let mut current: Option<EncoderModel> = None;
    let mut best: Option<(f64, EncoderModel)> = None;
    let mut history: Vec<RoundRecord> = Vec::new();
    let mut err_old = f64::INFINITY;
    let mut err = 1.0;

    for round in 1..=boost_cfg.max_rounds {
        if round > 1 && (err_old - err) <= boost_cfg.tolerance {
            break;
        }
        let mine_seed = derive_seed(boost_cfg.seed, 2 * round as u64);
        let dev_mine_seed = derive_seed(boost_cfg.seed, 2 * round as u64 + 1);
        let (train_ex, dev_ex) = match &current {
            None => (
                mine_negatives(&lexical, train, corpus, boost_cfg, mine_seed)?,
                mine_negatives(&lexical, dev, corpus, boost_cfg, dev_mine_seed)?,
            ),
            Some(model) => {
                let single = Ensemble::new(model.clone());
                let retriever = EnsembleRetriever::new(&single, &feats);
                (
                    mine_negatives(&retriever, train, corpus, boost_cfg, mine_seed)?,
                    mine_negatives(&retriever, dev, corpus, boost_cfg, dev_mine_seed)?,
                )
            }
        };

        let cfg = round_train_config(train_cfg, boost_cfg, round);
        let outcome = encoder::train(
            &train_ex,
            &dev_ex,
            corpus,
            &boost_cfg.featurizer,
            boost_cfg.dim_per_round,
            &cfg,
            derive_seed(boost_cfg.seed, 0x2000 + round as u64),
        )?;

        let single = Ensemble::new(outcome.model.clone());
        let metric = evaluate_ensemble(&single, &feats, dev, boost_cfg.dev_metric)?;
        history.push(RoundRecord {
            round,
            dev_metric: metric,
            train_nll: outcome.final_train_nll,
        });
        if best.as_ref().map_or(true, |(m, _)| metric > *m) {
            best = Some((metric, outcome.model.clone()));
        }
        current = Some(outcome.model);
        err_old = err;
        err = 1.0 - metric;
    }

    Ok((best.unwrap().1, history))
}

/// Independent-seed ensembling baseline: no sequential error feedback.
///
/// Every component trains like iterative round 1 (lexical initial
/// negatives, in-batch extras) under a different derived seed, and the
/// results are concatenated with weight 1.
pub fn run_bagging(
    train: &[TrainPair],
    dev: &[TrainPair],
    corpus: &Corpus,
    rounds: usize,
    boost_cfg: &BoostConfig,
    train_cfg: &TrainConfig,
) -> Result<Ensemble> {
    boost_cfg.validate()?;
    if rounds < 1 {
        return Err(Error::Argument("rounds must be >= 1".to_string()));
    }
    if dev.is_empty() {
        return Err(Error::Argument("empty dev set".to_string()));
    }
    let lexical = LexicalRetriever::build(corpus, &boost_cfg.featurizer);

    let mut ensemble: Option<Ensemble> = None;
    for round in 1..=rounds {
        let component_seed = derive_seed(boost_cfg.seed, 0x3000 + round as u64);
        let train_ex = mine_negatives(&lexical, train, corpus, boost_cfg, component_seed)?;
        let dev_ex = mine_negatives(
            &lexical,
            dev,
            corpus,
            boost_cfg,
            derive_seed(component_seed, 1),
        )?;
        let cfg = TrainConfig {
            in_batch_negatives: true,
            negatives_per_example: boost_cfg.negatives_n,
            seed: derive_seed(component_seed, 2),
            ..train_cfg.clone()
        };
        let outcome = encoder::train(
            &train_ex,
            &dev_ex,
            corpus,
            &boost_cfg.featurizer,
            boost_cfg.dim_per_round,
            &cfg,
            derive_seed(component_seed, 3),
        )?;
        match &mut ensemble {
            None => ensemble = Some(Ensemble::new(outcome.model)),
            Some(e) => e.push(outcome.model)?,
        }
    }
    Ok(ensemble.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Passage;

    fn small_featurizer() -> FeaturizerConfig {
        FeaturizerConfig {
            num_buckets: 1 << 10,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 7,
        }
    }

    /// Three-topic corpus with term overlap between query and gold.
    fn topic_dataset(
        passages_per_topic: usize,
        queries_per_topic: usize,
    ) -> (Corpus, Vec<TrainPair>) {
        let topics = [
            ["solar", "panel", "energy", "grid"],
            ["violin", "sonata", "concert", "melody"],
            ["glacier", "tundra", "permafrost", "ice"],
        ];
        let mut passages = Vec::new();
        let mut pairs = Vec::new();
        for (t, words) in topics.iter().enumerate() {
            for i in 0..passages_per_topic {
                let id = format!("t{t}p{i}");
                let text = format!(
                    "{} {} number {} {}",
                    words[i % 4],
                    words[(i + 1) % 4],
                    i,
                    words[(i + 2) % 4]
                );
                passages.push(Passage {
                    id,
                    title: String::new(),
                    text,
                });
            }
            for q in 0..queries_per_topic {
                let gold = q % passages_per_topic;
                pairs.push(TrainPair {
                    query_id: format!("t{t}q{q}"),
                    query_text: format!("{} {}", words[gold % 4], words[(gold + 1) % 4]),
                    positive_ids: vec![format!("t{t}p{gold}")],
                });
            }
        }
        (Corpus::from_passages(passages).unwrap(), pairs)
    }

    fn quick_boost_cfg() -> BoostConfig {
        BoostConfig {
            featurizer: small_featurizer(),
            max_rounds: 2,
            tolerance: 0.0,
            dim_per_round: 4,
            negatives_n: 2,
            mine_top_n: 10,
            mine_temperature: 1.0,
            dev_metric: DevMetric::RecallAt(5),
            mode: BoostMode::Boost,
            seed: 13,
        }
    }

    fn quick_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            negatives_per_example: 2,
            ..Default::default()
        }
    }

    #[test]
    fn single_component_embeds_like_the_model() {
        let model = EncoderModel::random(small_featurizer(), 6, 1).unwrap();
        let ensemble = Ensemble::new(model.clone());
        let text = "solar panel energy";
        assert_eq!(
            ensemble_embed(&ensemble, text, Side::Query),
            encoder::embed(&model, text)
        );
        assert_eq!(
            ensemble_embed(&ensemble, text, Side::Passage),
            encoder::embed(&model, text)
        );
    }

    #[test]
    fn concat_dot_decomposes_into_weighted_component_scores() {
        let mut ensemble =
            Ensemble::new(EncoderModel::random(small_featurizer(), 32, 1).unwrap());
        ensemble
            .push_weighted(EncoderModel::random(small_featurizer(), 32, 2).unwrap(), 0.7)
            .unwrap();
        assert_eq!(ensemble.total_dim(), 64);

        let (q, p) = ("violin sonata", "a concert of melody");
        let concat = f64::from(ensemble_score(&ensemble, q, p));
        let by_parts: f64 = ensemble
            .components()
            .iter()
            .map(|(m, alpha)| alpha * encoder::score(m, q, p))
            .sum();
        assert!(
            (concat - by_parts).abs() < 1e-5 * (1.0 + concat.abs()),
            "{concat} vs {by_parts}"
        );
    }

    #[test]
    fn five_components_of_32_dims_make_160() {
        let mut ensemble =
            Ensemble::new(EncoderModel::random(small_featurizer(), 32, 0).unwrap());
        for seed in 1..5 {
            ensemble
                .push(EncoderModel::random(small_featurizer(), 32, seed).unwrap())
                .unwrap();
        }
        assert_eq!(ensemble.total_dim(), 160);
        assert_eq!(
            ensemble_embed(&ensemble, "anything", Side::Query).len(),
            160
        );
    }

    #[test]
    fn zero_weight_components_score_zero() {
        let ensemble = Ensemble::new(EncoderModel::zeros(small_featurizer(), 4).unwrap());
        assert_eq!(ensemble_score(&ensemble, "a", "b"), 0.0);
    }

    #[test]
    fn alpha_zero_silences_a_component() {
        let mut ensemble =
            Ensemble::new(EncoderModel::random(small_featurizer(), 8, 3).unwrap());
        ensemble
            .push_weighted(EncoderModel::random(small_featurizer(), 8, 4).unwrap(), 0.0)
            .unwrap();
        let (q, p) = ("glacier ice", "tundra permafrost");
        let combined = f64::from(ensemble_score(&ensemble, q, p));
        let first_only = encoder::score(&ensemble.components()[0].0, q, p);
        assert!((combined - first_only).abs() < 1e-5);
    }

    #[test]
    fn appending_zero_component_leaves_scores_unchanged() {
        let (corpus, pairs) = topic_dataset(5, 2);
        let mut ensemble =
            Ensemble::new(EncoderModel::random(small_featurizer(), 4, 9).unwrap());
        let before: Vec<f32> = pairs
            .iter()
            .map(|pair| {
                ensemble_score(
                    &ensemble,
                    &pair.query_text,
                    &corpus.get(0).full_text(),
                )
            })
            .collect();

        let mut zero = EncoderModel::zeros(small_featurizer(), 4).unwrap();
        zero.ln_bias = vec![0.0; 4];
        ensemble.push(zero).unwrap();
        let after: Vec<f32> = pairs
            .iter()
            .map(|pair| {
                ensemble_score(
                    &ensemble,
                    &pair.query_text,
                    &corpus.get(0).full_text(),
                )
            })
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn mismatched_featurizer_is_rejected() {
        let mut ensemble =
            Ensemble::new(EncoderModel::random(small_featurizer(), 4, 0).unwrap());
        let other = FeaturizerConfig {
            hash_seed: 99,
            ..small_featurizer()
        };
        let model = EncoderModel::random(other, 4, 1).unwrap();
        assert!(ensemble.push(model).is_err());
    }

    #[test]
    fn ensemble_ranking_matches_matrix_search() {
        let (corpus, pairs) = topic_dataset(10, 3);
        let mut ensemble =
            Ensemble::new(EncoderModel::random(small_featurizer(), 4, 5).unwrap());
        ensemble
            .push(EncoderModel::random(small_featurizer(), 4, 6).unwrap())
            .unwrap();
        let feats = CorpusFeatures::build(&corpus, ensemble.featurizer());
        let matrix = ensemble_corpus_matrix(&ensemble, &feats);

        for pair in &pairs {
            let q = ensemble_embed(&ensemble, &pair.query_text, Side::Query);
            let by_matrix = exact_search_rows(&matrix, &q, corpus.len()).unwrap();
            // Re-rank by direct pairwise scoring, same tie-break.
            let scored: Vec<(usize, f32)> = (0..corpus.len())
                .map(|row| {
                    (
                        row,
                        ensemble_score(&ensemble, &pair.query_text, &corpus.get(row).full_text()),
                    )
                })
                .collect();
            let direct = crate::index::select_top_k(scored, corpus.len());
            let matrix_rows: Vec<usize> = by_matrix.iter().map(|(r, _)| *r).collect();
            let direct_rows: Vec<usize> = direct.iter().map(|(r, _)| *r).collect();
            assert_eq!(matrix_rows, direct_rows);
        }
    }

    #[test]
    fn initial_negatives_respect_positives() {
        let (corpus, pairs) = topic_dataset(4, 2);
        let examples = initial_negatives(&pairs, &corpus, 3, 1).unwrap();
        assert_eq!(examples.len(), pairs.len());
        for ex in &examples {
            assert_eq!(ex.negative_ids.len(), 3);
            let unique: HashSet<&String> = ex.negative_ids.iter().collect();
            assert_eq!(unique.len(), 3, "duplicate negatives");
            for pos in &ex.pair.positive_ids {
                assert!(!ex.negative_ids.contains(pos));
            }
        }
    }

    #[test]
    fn two_passage_corpus_forces_the_other_negative() {
        let corpus = Corpus::from_passages(vec![
            Passage {
                id: "a".into(),
                title: String::new(),
                text: "alpha".into(),
            },
            Passage {
                id: "b".into(),
                title: String::new(),
                text: "beta".into(),
            },
        ])
        .unwrap();
        let pair = TrainPair {
            query_id: "q".into(),
            query_text: "alpha".into(),
            positive_ids: vec!["a".into()],
        };
        let examples = initial_negatives(&[pair], &corpus, 1, 5).unwrap();
        assert_eq!(examples[0].negative_ids, vec!["b".to_string()]);
    }

    fn chi_square_uniform(counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / counts.len() as f64;
        counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum()
    }

    #[test]
    fn initial_negatives_are_empirically_uniform() {
        let passages: Vec<Passage> = (0..10)
            .map(|i| Passage {
                id: format!("p{i}"),
                title: String::new(),
                text: format!("text {i}"),
            })
            .collect();
        let corpus = Corpus::from_passages(passages).unwrap();
        let pair = TrainPair {
            query_id: "q".into(),
            query_text: "text".into(),
            positive_ids: vec!["p0".into()],
        };

        let mut counts = vec![0u64; 10];
        for seed in 0..10_000u64 {
            let ex = initial_negatives(std::slice::from_ref(&pair), &corpus, 1, seed).unwrap();
            let row = corpus.row_of(&ex[0].negative_ids[0]).unwrap();
            counts[row] += 1;
        }
        assert_eq!(counts[0], 0, "positive sampled as negative");
        // 9 candidates, dof 8: chi-square critical value at p = 0.01.
        let stat = chi_square_uniform(&counts[1..]);
        assert!(stat < 20.0902, "chi-square {stat} rejects uniformity");
    }

    #[test]
    fn mining_never_emits_positives() {
        let (corpus, pairs) = topic_dataset(10, 4);
        let ensemble = Ensemble::new(EncoderModel::random(small_featurizer(), 4, 2).unwrap());
        let feats = CorpusFeatures::build(&corpus, ensemble.featurizer());
        let retriever = EnsembleRetriever::new(&ensemble, &feats);
        let cfg = quick_boost_cfg();
        for seed in 0..100 {
            let examples = mine_negatives(&retriever, &pairs, &corpus, &cfg, seed).unwrap();
            for ex in &examples {
                for pos in &ex.pair.positive_ids {
                    assert!(!ex.negative_ids.contains(pos));
                }
            }
        }
    }

    #[test]
    fn mining_is_deterministic() {
        let (corpus, pairs) = topic_dataset(10, 4);
        let ensemble = Ensemble::new(EncoderModel::random(small_featurizer(), 4, 2).unwrap());
        let feats = CorpusFeatures::build(&corpus, ensemble.featurizer());
        let retriever = EnsembleRetriever::new(&ensemble, &feats);
        let cfg = quick_boost_cfg();
        let a = mine_negatives(&retriever, &pairs, &corpus, &cfg, 77).unwrap();
        let b = mine_negatives(&retriever, &pairs, &corpus, &cfg, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_temperature_sampling_is_uniform() {
        // Fixed 5-candidate pool with very distinct scores.
        let pool: Vec<(usize, f32)> = vec![(0, 5.0), (1, 4.0), (2, 3.0), (3, 2.0), (4, 1.0)];
        let mut counts = vec![0u64; 5];
        for seed in 0..10_000u64 {
            let mut rng = rng_for(seed, 0);
            let picked = softmax_sample_without_replacement(&pool, 1, 1e9, &mut rng);
            counts[picked[0]] += 1;
        }
        // dof 4: chi-square critical value at p = 0.01.
        let stat = chi_square_uniform(&counts);
        assert!(stat < 13.2767, "chi-square {stat} rejects uniformity");
    }

    #[test]
    fn low_temperature_sampling_takes_the_top() {
        let pool: Vec<(usize, f32)> = vec![(10, 1.0), (11, 3.0), (12, 2.0), (13, -1.0)];
        for seed in 0..50u64 {
            let mut rng = rng_for(seed, 1);
            let picked = softmax_sample_without_replacement(&pool, 2, 1e-9, &mut rng);
            assert_eq!(picked, vec![11, 12]);
        }
    }

    #[test]
    fn short_pool_pads_with_random_negatives() {
        let (corpus, pairs) = topic_dataset(10, 1);
        let cfg = BoostConfig {
            negatives_n: 8,
            mine_top_n: 9,
            ..quick_boost_cfg()
        };
        // Lexical retriever returns only rows sharing a term, which is
        // fewer than 8 for these queries, forcing the padding path.
        let lexical = LexicalRetriever::build(&corpus, &cfg.featurizer);
        let examples = mine_negatives(&lexical, &pairs, &corpus, &cfg, 3).unwrap();
        for ex in &examples {
            assert_eq!(ex.negative_ids.len(), 8);
            let unique: HashSet<&String> = ex.negative_ids.iter().collect();
            assert_eq!(unique.len(), 8);
        }
    }

    #[test]
    fn lexical_retriever_favors_term_overlap() {
        let (corpus, _) = topic_dataset(6, 1);
        let lexical = LexicalRetriever::build(&corpus, &small_featurizer());
        let hits = lexical.top_candidates("violin sonata", 5);
        assert!(!hits.is_empty());
        let top = corpus.get(hits[0].0);
        assert!(
            top.text.contains("violin") || top.text.contains("sonata"),
            "top hit '{}' shares no query term",
            top.text
        );
    }

    #[test]
    fn single_round_boosting_returns_one_learner() {
        let (corpus, pairs) = topic_dataset(8, 4);
        let (train, dev) = crate::data::split_dev(&pairs, 0.25, 3).unwrap();
        let cfg = BoostConfig {
            max_rounds: 1,
            ..quick_boost_cfg()
        };
        let (ensemble, history) =
            run_boosting(&train, &dev, &corpus, &cfg, &quick_train_cfg()).unwrap();
        assert_eq!(ensemble.len(), 1);
        assert_eq!(history.len(), 1);
        assert_eq!(history[0].round, 1);
    }

    #[test]
    fn boosting_history_error_non_increasing_to_selected_round() {
        let (corpus, pairs) = topic_dataset(12, 6);
        let (train, dev) = crate::data::split_dev(&pairs, 0.25, 3).unwrap();
        let cfg = BoostConfig {
            max_rounds: 3,
            ..quick_boost_cfg()
        };
        let (ensemble, history) =
            run_boosting(&train, &dev, &corpus, &cfg, &quick_train_cfg()).unwrap();
        assert!(history.len() <= 3);
        assert!(ensemble.len() <= history.len());
        for w in history.windows(2).take(ensemble.len() - 1) {
            assert!(
                w[1].dev_metric >= w[0].dev_metric,
                "metric dropped before the selected round: {history:?}"
            );
        }
    }

    #[test]
    fn boosting_is_deterministic() {
        let (corpus, pairs) = topic_dataset(8, 4);
        let (train, dev) = crate::data::split_dev(&pairs, 0.25, 3).unwrap();
        let cfg = quick_boost_cfg();
        let (a, ha) = run_boosting(&train, &dev, &corpus, &cfg, &quick_train_cfg()).unwrap();
        let (b, hb) = run_boosting(&train, &dev, &corpus, &cfg, &quick_train_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn iterative_returns_best_round_model() {
        let (corpus, pairs) = topic_dataset(8, 4);
        let (train, dev) = crate::data::split_dev(&pairs, 0.25, 3).unwrap();
        let cfg = BoostConfig {
            mode: BoostMode::Iterative,
            max_rounds: 2,
            ..quick_boost_cfg()
        };
        let (model, history) =
            run_iterative(&train, &dev, &corpus, &cfg, &quick_train_cfg()).unwrap();
        assert_eq!(model.dim, cfg.dim_per_round);
        let best = history
            .iter()
            .map(|r| r.dev_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        let feats = CorpusFeatures::build(&corpus, &cfg.featurizer);
        let returned =
            evaluate_ensemble(&Ensemble::new(model), &feats, &dev, cfg.dev_metric).unwrap();
        assert!((returned - best).abs() < 1e-12);
        assert!(returned >= history[0].dev_metric);
    }

    #[test]
    fn bagging_components_differ_by_seed() {
        let (corpus, pairs) = topic_dataset(8, 4);
        let (train, dev) = crate::data::split_dev(&pairs, 0.25, 3).unwrap();
        let cfg = BoostConfig {
            mode: BoostMode::Bagging,
            ..quick_boost_cfg()
        };
        let single = run_bagging(&train, &dev, &corpus, 1, &cfg, &quick_train_cfg()).unwrap();
        assert_eq!(single.len(), 1);

        let bagged = run_bagging(&train, &dev, &corpus, 2, &cfg, &quick_train_cfg()).unwrap();
        assert_eq!(bagged.len(), 2);
        assert_ne!(
            bagged.components()[0].0.weights,
            bagged.components()[1].0.weights
        );
        // Same derivation, same first component.
        assert_eq!(single.components()[0].0, bagged.components()[0].0);
    }

    #[test]
    fn dev_metric_parses_both_forms() {
        assert_eq!("r@10".parse::<DevMetric>().unwrap(), DevMetric::RecallAt(10));
        assert_eq!("R@20".parse::<DevMetric>().unwrap(), DevMetric::RecallAt(20));
        assert_eq!("mrr@10".parse::<DevMetric>().unwrap(), DevMetric::MrrAt10);
        assert!("ndcg".parse::<DevMetric>().is_err());
        assert!("r@0".parse::<DevMetric>().is_err());
    }
}
