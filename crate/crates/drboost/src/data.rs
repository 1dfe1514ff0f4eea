//! Corpus and training-pair ingestion.
//!
//! All inputs are line-oriented UTF-8 files: `corpus.jsonl` with keys
//! `{id, title, text}`, train/dev pair files with keys
//! `{query_id, query_text, positive_ids}`, and a `qrels.tsv` with
//! `query_id<TAB>passage_id<TAB>relevance` for graded judgments.
//! Loaders validate ids eagerly; the resulting stores are immutable and
//! safe to share across worker threads.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// One corpus record. `text` may be empty only when `title` is not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Passage {
    /// Text as seen by the featurizer: title and body joined by a space.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else if self.text.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// A gold query with one or more annotated positive passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPair {
    pub query_id: String,
    pub query_text: String,
    pub positive_ids: Vec<String>,
}

/// A train pair augmented with mined or sampled negatives.
///
/// Construction enforces that negatives are disjoint from positives and
/// that every id resolves against the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedExample {
    pub pair: TrainPair,
    pub negative_ids: Vec<String>,
}

impl AugmentedExample {
    pub fn new(pair: TrainPair, negative_ids: Vec<String>, corpus: &Corpus) -> Result<Self> {
        if negative_ids.is_empty() {
            return Err(Error::Validation(format!(
                "example for query '{}' has no negatives",
                pair.query_id
            )));
        }
        let positives: HashSet<&str> = pair.positive_ids.iter().map(String::as_str).collect();
        for id in &negative_ids {
            if positives.contains(id.as_str()) {
                return Err(Error::Validation(format!(
                    "negative '{}' for query '{}' is also a positive",
                    id, pair.query_id
                )));
            }
            if corpus.row_of(id).is_none() {
                return Err(Error::Validation(format!(
                    "negative '{}' for query '{}' not found in corpus",
                    id, pair.query_id
                )));
            }
        }
        Ok(AugmentedExample { pair, negative_ids })
    }
}

/// Immutable passage store with stable insertion order.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut corpus = Corpus {
            passages: Vec::with_capacity(passages.len()),
            by_id: HashMap::with_capacity(passages.len()),
        };
        for p in passages {
            corpus.push(p, None)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, passage: Passage, line: Option<usize>) -> Result<()> {
        if passage.id.is_empty() {
            return Err(Error::Validation(match line {
                Some(l) => format!("empty passage id at line {l}"),
                None => "empty passage id".to_string(),
            }));
        }
        if passage.text.is_empty() && passage.title.is_empty() {
            return Err(Error::Validation(format!(
                "passage '{}' has neither title nor text",
                passage.id
            )));
        }
        if self.by_id.contains_key(&passage.id) {
            return Err(Error::Validation(match line {
                Some(l) => format!("duplicate passage id '{}' at line {l}", passage.id),
                None => format!("duplicate passage id '{}'", passage.id),
            }));
        }
        self.by_id.insert(passage.id.clone(), self.passages.len());
        self.passages.push(passage);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, row: usize) -> &Passage {
        &self.passages[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }
}

/// Load a JSONL corpus, rejecting malformed lines and duplicate ids.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut corpus = Corpus {
        passages: Vec::new(),
        by_id: HashMap::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let passage: Passage = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        corpus.push(passage, Some(line_no))?;
    }
    Ok(corpus)
}

/// Re-emit a corpus in its canonical JSONL form (insertion order).
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in corpus.iter() {
        serde_json::to_writer(&mut w, p).map_err(|e| {
            Error::io(path, std::io::Error::other(e))
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load gold pairs, verifying every positive id against the corpus.
pub fn load_train_pairs(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<TrainPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: TrainPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        validate_pair(&pair, corpus)?;
        if !seen.insert(pair.query_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate query id '{}' at line {line_no}",
                pair.query_id
            )));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

fn validate_pair(pair: &TrainPair, corpus: &Corpus) -> Result<()> {
    if pair.query_id.is_empty() {
        return Err(Error::Validation("empty query id".to_string()));
    }
    if pair.positive_ids.is_empty() {
        return Err(Error::Validation(format!(
            "query '{}' has no positive ids",
            pair.query_id
        )));
    }
    for id in &pair.positive_ids {
        if corpus.row_of(id).is_none() {
            return Err(Error::Validation(format!(
                "query '{}' references unknown passage '{}'",
                pair.query_id, id
            )));
        }
    }
    Ok(())
}

/// Write pairs as JSONL.
pub fn save_train_pairs(pairs: &[TrainPair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p).map_err(|e| {
            Error::io(path, std::io::Error::other(e))
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Graded relevance judgments: query id -> (passage id -> relevance >= 1).
pub type Qrels = HashMap<String, HashMap<String, u32>>;

/// Load a `query_id<TAB>passage_id<TAB>relevance` file.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut qrels: Qrels = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (qid, pid, rel) = match (fields.next(), fields.next(), fields.next()) {
            (Some(q), Some(p), Some(r)) => (q, p, r),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "expected query_id<TAB>passage_id<TAB>relevance".to_string(),
                })
            }
        };
        let rel: u32 = rel.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("relevance '{rel}' is not an integer"),
        })?;
        if rel < 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "relevance must be >= 1".to_string(),
            });
        }
        qrels
            .entry(qid.to_string())
            .or_default()
            .insert(pid.to_string(), rel);
    }
    Ok(qrels)
}

/// Deterministically partition pairs into (train, dev).
///
/// The dev set size is `round(len * fraction)`; relative order within
/// each side follows the input order.
pub fn split_dev(
    pairs: &[TrainPair],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainPair>, Vec<TrainPair>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "dev fraction must be in (0, 1), got {fraction}"
        )));
    }
    let dev_len = (pairs.len() as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng_for(seed, 0x53504c49)); // "SPLI" stream tag

    let dev_rows: HashSet<usize> = order.into_iter().take(dev_len).collect();
    let mut train = Vec::with_capacity(pairs.len() - dev_len);
    let mut dev = Vec::with_capacity(dev_len);
    for (i, pair) in pairs.iter().enumerate() {
        if dev_rows.contains(&i) {
            dev.push(pair.clone());
        } else {
            train.push(pair.clone());
        }
    }
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, content.as_bytes()).unwrap();
        f
    }

    fn passage(id: &str) -> String {
        format!(r#"{{"id":"{id}","title":"t {id}","text":"body of {id}"}}"#)
    }

    #[test]
    fn loads_corpus_in_order() {
        let f = write_temp(&format!(
            "{}\n{}\n{}\n",
            passage("p1"),
            passage("p2"),
            passage("p3")
        ));
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.get(0).id, "p1");
        assert_eq!(corpus.get(2).id, "p3");
        assert_eq!(corpus.row_of("p2"), Some(1));
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let mut lines = vec![passage("p1")];
        lines.push(passage("p7"));
        for i in 0..6 {
            lines.push(passage(&format!("q{i}")));
        }
        lines.push(passage("p7")); // line 9
        let f = write_temp(&(lines.join("\n") + "\n"));
        let err = load_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains("p7"), "{err}");
        assert!(err.contains('9'), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_temp(&format!("{}\nnot json\n", passage("p1")));
        let err = load_corpus(f.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = write_temp(r#"{"id":"p1","title":"t","text":"x","extra":1}"#);
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn empty_text_needs_title() {
        let f = write_temp(r#"{"id":"p1","title":"","text":""}"#);
        assert!(load_corpus(f.path()).is_err());
        let f = write_temp(r#"{"id":"p1","title":"only title","text":""}"#);
        assert!(load_corpus(f.path()).is_ok());
    }

    #[test]
    fn corpus_roundtrip_is_byte_identical() {
        let f = write_temp(&format!("{}\n{}\n", passage("a"), passage("b")));
        let corpus = load_corpus(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_corpus(&corpus, out.path()).unwrap();
        let original = std::fs::read(f.path()).unwrap();
        let rewritten = std::fs::read(out.path()).unwrap();
        assert_eq!(original, rewritten);
    }

    #[test]
    fn pairs_validate_positive_ids() {
        let cf = write_temp(&format!("{}\n", passage("p1")));
        let corpus = load_corpus(cf.path()).unwrap();

        let ok = write_temp(r#"{"query_id":"q1","query_text":"x","positive_ids":["p1"]}"#);
        assert_eq!(load_train_pairs(ok.path(), &corpus).unwrap().len(), 1);

        let bad = write_temp(r#"{"query_id":"q1","query_text":"x","positive_ids":["zzz"]}"#);
        let err = load_train_pairs(bad.path(), &corpus).unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
        assert!(err.contains("q1"), "{err}");
    }

    #[test]
    fn augmented_example_rejects_positive_overlap() {
        let cf = write_temp(&format!("{}\n{}\n", passage("p1"), passage("p2")));
        let corpus = load_corpus(cf.path()).unwrap();
        let pair = TrainPair {
            query_id: "q".into(),
            query_text: "x".into(),
            positive_ids: vec!["p1".into()],
        };
        assert!(AugmentedExample::new(pair.clone(), vec!["p1".into()], &corpus).is_err());
        assert!(AugmentedExample::new(pair.clone(), vec![], &corpus).is_err());
        assert!(AugmentedExample::new(pair.clone(), vec!["nope".into()], &corpus).is_err());
        assert!(AugmentedExample::new(pair, vec!["p2".into()], &corpus).is_ok());
    }

    fn numbered_pairs(n: usize) -> Vec<TrainPair> {
        (0..n)
            .map(|i| TrainPair {
                query_id: format!("q{i}"),
                query_text: format!("query {i}"),
                positive_ids: vec![format!("p{i}")],
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let pairs = numbered_pairs(10);
        let (train, dev) = split_dev(&pairs, 0.2, 1).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(dev.len(), 2);

        let train_ids: HashSet<_> = train.iter().map(|p| p.query_id.clone()).collect();
        for d in &dev {
            assert!(!train_ids.contains(&d.query_id));
        }

        let (train2, dev2) = split_dev(&pairs, 0.2, 1).unwrap();
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
    }

    #[test]
    fn split_depends_on_seed() {
        let pairs = numbered_pairs(2000);
        let (_, dev1) = split_dev(&pairs, 0.25, 1).unwrap();
        let (_, dev2) = split_dev(&pairs, 0.25, 2).unwrap();
        let ids1: HashSet<_> = dev1.iter().map(|p| p.query_id.clone()).collect();
        let ids2: HashSet<_> = dev2.iter().map(|p| p.query_id.clone()).collect();
        let overlap = ids1.intersection(&ids2).count();
        assert!(overlap < ids1.len(), "seeds produced identical dev sets");
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let pairs = numbered_pairs(4);
        assert!(split_dev(&pairs, 0.0, 1).is_err());
        assert!(split_dev(&pairs, 1.0, 1).is_err());
        assert!(split_dev(&pairs, -0.5, 1).is_err());
    }

    #[test]
    fn qrels_parse_and_validate() {
        let f = write_temp("q1\tp1\t2\nq1\tp2\t1\nq2\tp3\t3\n");
        let qrels = load_qrels(f.path()).unwrap();
        assert_eq!(qrels["q1"]["p1"], 2);
        assert_eq!(qrels["q2"]["p3"], 3);

        let bad = write_temp("q1\tp1\t0\n");
        assert!(load_qrels(bad.path()).is_err());
        let malformed = write_temp("q1 p1 1\n");
        assert!(load_qrels(malformed.path()).is_err());
    }
}
