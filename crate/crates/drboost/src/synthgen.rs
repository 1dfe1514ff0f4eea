//! Deterministic synthetic retrieval benchmark.
//!
//! Every topic owns a disjoint slice of the vocabulary, and passages
//! within a topic are grouped into subtopics whose word distributions
//! are Zipfian over rotated orderings of the slice. Each level of the
//! hierarchy is coarse enough to fit a small encoder: separating topics
//! is easy, separating subtopics is harder, and separating passages
//! within a subtopic requires tail words. That layering is what makes
//! sequential specialization observable round by round at desk scale.
//! A shared noise slice injects vocabulary common to all topics.
//!
//! Queries sample their words from the gold passage's actual words,
//! with a configurable fraction replaced by noise words, so lexical
//! overlap ties each query to its gold without making retrieval
//! trivial.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::data::{split_dev, Corpus, Passage, TrainPair};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Generator settings. The defaults produce a benchmark where a plain
/// lexical scorer lands mid-range, leaving headroom for trained models.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_topics: usize,
    pub passages_per_topic: usize,
    pub vocab_size: usize,
    pub words_per_passage: usize,
    /// Queries generated per topic before the train/dev split.
    pub queries_per_topic: usize,
    pub query_len: usize,
    /// Fraction of words replaced by shared-noise words, in [0, 1).
    pub noise_rate: f64,
    /// Fraction of queries held out as the dev split.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_topics: 20,
            passages_per_topic: 1000,
            vocab_size: 4200,
            words_per_passage: 20,
            queries_per_topic: 125,
            query_len: 6,
            noise_rate: 0.35,
            dev_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics == 0
            || self.passages_per_topic == 0
            || self.vocab_size == 0
            || self.words_per_passage == 0
            || self.queries_per_topic == 0
            || self.query_len == 0
        {
            return Err(Error::Argument("all generator sizes must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Argument("noise_rate must be in [0, 1)".to_string()));
        }
        if !(0.0 < self.dev_fraction && self.dev_fraction < 1.0) {
            return Err(Error::Argument("dev_fraction must be in (0, 1)".to_string()));
        }
        // One slice per topic plus one shared noise slice.
        if self.slice_size() < 2 {
            return Err(Error::Argument(format!(
                "vocab_size {} too small for {} topics",
                self.vocab_size, self.num_topics
            )));
        }
        Ok(())
    }

    fn slice_size(&self) -> usize {
        self.vocab_size / (self.num_topics + 1)
    }
}

/// Cumulative Zipf weights (exponent 1) over `n` ranks.
struct ZipfTable {
    cumulative: Vec<f64>,
}

impl ZipfTable {
    fn new(n: usize) -> ZipfTable {
        let mut cumulative = Vec::with_capacity(n);
        let mut total = 0.0f64;
        for rank in 1..=n {
            total += 1.0 / rank as f64;
            cumulative.push(total);
        }
        ZipfTable { cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u)
    }
}

/// Subtopics per topic; derived rather than configured so the public
/// knob surface stays small.
fn subtopics_per_topic(passages_per_topic: usize) -> usize {
    10.min(passages_per_topic)
}

/// Word offset within a topic slice for subtopic `g`: each subtopic's
/// Zipf distribution starts its head at a different rotation of the
/// slice, so subtopics share the slice but have distinct head words.
fn subtopic_word(slice: usize, subtopics: usize, g: usize, rank: usize) -> usize {
    (g * slice / subtopics + rank) % slice
}

fn word(index: usize) -> String {
    format!("w{index:05}")
}

/// Generated dataset plus the passage-to-topic sidecar.
pub struct SynthDataset {
    pub corpus: Corpus,
    pub train: Vec<TrainPair>,
    pub dev: Vec<TrainPair>,
    /// (passage id, topic index) in corpus order.
    pub topics: Vec<(String, usize)>,
}

/// Generate a corpus, gold pairs, and the train/dev split.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let slice = config.slice_size();
    let noise_base = config.num_topics * slice;
    let noise_len = config.vocab_size - noise_base;
    let zipf = ZipfTable::new(slice);

    let mut passages = Vec::with_capacity(config.num_topics * config.passages_per_topic);
    let mut passage_words: Vec<Vec<usize>> = Vec::with_capacity(passages.capacity());
    let mut topics = Vec::with_capacity(passages.capacity());

    let subtopics = subtopics_per_topic(config.passages_per_topic);
    for topic in 0..config.num_topics {
        let topic_base = topic * slice;
        for p in 0..config.passages_per_topic {
            let subtopic = p % subtopics;
            let mut rng = rng_for(config.seed, (0x5000 + topic * 131 + p) as u64 ^ 0x50415353);
            let mut words = Vec::with_capacity(config.words_per_passage);
            for _ in 0..config.words_per_passage {
                if rng.random::<f64>() < config.noise_rate {
                    words.push(noise_base + rng.random_range(0..noise_len));
                } else {
                    let rank = zipf.sample(&mut rng);
                    words.push(topic_base + subtopic_word(slice, subtopics, subtopic, rank));
                }
            }
            let id = format!("t{topic:02}-p{p:04}");
            let mut text = String::with_capacity(config.words_per_passage * 7);
            for (i, &w) in words.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                }
                let _ = write!(text, "{}", word(w));
            }
            passages.push(Passage {
                id: id.clone(),
                title: String::new(),
                text,
            });
            passage_words.push(words);
            topics.push((id, topic));
        }
    }
    let corpus = Corpus::from_passages(passages)?;

    let mut pairs = Vec::with_capacity(config.num_topics * config.queries_per_topic);
    for topic in 0..config.num_topics {
        for q in 0..config.queries_per_topic {
            let mut rng = rng_for(config.seed, (0x9000 + topic * 257 + q) as u64 ^ 0x51525923);
            let gold_local = rng.random_range(0..config.passages_per_topic);
            let gold_row = topic * config.passages_per_topic + gold_local;
            let gold_words = &passage_words[gold_row];

            let mut words = Vec::with_capacity(config.query_len);
            for _ in 0..config.query_len {
                let from_gold = gold_words[rng.random_range(0..gold_words.len())];
                if rng.random::<f64>() < config.noise_rate {
                    words.push(noise_base + rng.random_range(0..noise_len));
                } else {
                    words.push(from_gold);
                }
            }
            let mut text = String::with_capacity(config.query_len * 7);
            for (i, &w) in words.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                }
                let _ = write!(text, "{}", word(w));
            }
            pairs.push(TrainPair {
                query_id: format!("t{topic:02}-q{q:04}"),
                query_text: text,
                positive_ids: vec![corpus.get(gold_row).id.clone()],
            });
        }
    }

    let (train, dev) = split_dev(&pairs, config.dev_fraction, config.seed)?;
    Ok(SynthDataset {
        corpus,
        train,
        dev,
        topics,
    })
}

/// Write the dataset in the standard file layout:
/// `corpus.jsonl`, `train.jsonl`, `dev.jsonl`, `topics.tsv`.
pub fn write_dataset(dataset: &SynthDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::data::save_corpus(&dataset.corpus, dir.join("corpus.jsonl"))?;
    crate::data::save_train_pairs(&dataset.train, dir.join("train.jsonl"))?;
    crate::data::save_train_pairs(&dataset.dev, dir.join("dev.jsonl"))?;

    let mut tsv = String::new();
    for (id, topic) in &dataset.topics {
        let _ = writeln!(tsv, "{id}\t{topic}");
    }
    std::fs::write(dir.join("topics.tsv"), tsv).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_topics: 4,
            passages_per_topic: 30,
            vocab_size: 500,
            words_per_passage: 20,
            queries_per_topic: 10,
            query_len: 5,
            noise_rate: 0.2,
            dev_fraction: 0.2,
            seed: 3,
        }
    }

    #[test]
    fn generates_expected_counts() {
        let cfg = small_config();
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.corpus.len(), 120);
        assert_eq!(ds.train.len() + ds.dev.len(), 40);
        assert_eq!(ds.dev.len(), 8);
        assert_eq!(ds.topics.len(), 120);
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus.passages(), b.corpus.passages());
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
    }

    #[test]
    fn different_seed_different_text() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&SynthConfig {
            seed: 4,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.corpus.get(0).text, b.corpus.get(0).text);
    }

    #[test]
    fn golds_resolve_and_queries_are_nonempty() {
        let ds = generate(&small_config()).unwrap();
        for pair in ds.train.iter().chain(&ds.dev) {
            assert!(ds.corpus.row_of(&pair.positive_ids[0]).is_some());
            assert!(!pair.query_text.is_empty());
        }
    }

    #[test]
    fn zero_noise_query_words_come_from_the_gold() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            ..small_config()
        };
        let ds = generate(&cfg).unwrap();
        for pair in ds.train.iter().chain(&ds.dev) {
            let row = ds.corpus.row_of(&pair.positive_ids[0]).unwrap();
            let gold_words: HashSet<&str> = ds.corpus.get(row).text.split(' ').collect();
            for w in pair.query_text.split(' ') {
                assert!(gold_words.contains(w), "query word {w} not in gold");
            }
        }
    }

    #[test]
    fn topic_slices_are_disjoint() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            ..small_config()
        };
        let ds = generate(&cfg).unwrap();
        let slice = cfg.vocab_size / (cfg.num_topics + 1);
        for ((_, topic), passage) in ds.topics.iter().zip(ds.corpus.passages()) {
            for w in passage.text.split(' ') {
                let idx: usize = w[1..].parse().unwrap();
                assert_eq!(idx / slice, *topic, "word {w} outside topic {topic} slice");
            }
        }
    }

    #[test]
    fn rejects_undersized_vocab() {
        let cfg = SynthConfig {
            vocab_size: 5,
            num_topics: 10,
            ..small_config()
        };
        assert!(generate(&cfg).is_err());
        let cfg = SynthConfig {
            noise_rate: 1.0,
            ..small_config()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn writes_loadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_config()).unwrap();
        write_dataset(&ds, dir.path()).unwrap();

        let corpus = crate::data::load_corpus(dir.path().join("corpus.jsonl")).unwrap();
        assert_eq!(corpus.len(), ds.corpus.len());
        let train = crate::data::load_train_pairs(dir.path().join("train.jsonl"), &corpus).unwrap();
        assert_eq!(train.len(), ds.train.len());
        let topics = std::fs::read_to_string(dir.path().join("topics.tsv")).unwrap();
        assert_eq!(topics.lines().count(), ds.corpus.len());
    }
}
