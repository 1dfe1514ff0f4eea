//! Retrieval metrics and diagnostics.
//!
//! Plain metrics (R@K, MRR@10, NDCG@10) are pure functions of ranked
//! results and gold sets. The diagnostics reproduce the two analyses
//! that make boosted ensembles legible: top-k margin quantiles per
//! round, and the recall-versus-probes sweep for IVF search.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::boosting::{ensemble_corpus_matrix, ensemble_embed, CorpusFeatures, Ensemble, Side};
use crate::data::{Corpus, TrainPair};
use crate::error::{Error, Result};
use crate::index::{exact_search, ivf_search, EmbeddingMatrix, IvfIndex, SearchResult};

/// Fraction of queries with at least one gold id in the top k.
pub fn recall_at_k(
    results: &[SearchResult],
    golds: &[HashSet<String>],
    k: usize,
) -> Result<f64> {
    check_aligned(results, golds)?;
    let hits = results
        .iter()
        .zip(golds)
        .filter(|(r, g)| r.entries.iter().take(k).any(|(id, _)| g.contains(id)))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank of the first gold within the top 10.
pub fn mrr_at_10(results: &[SearchResult], golds: &[HashSet<String>]) -> Result<f64> {
    check_aligned(results, golds)?;
    let total: f64 = results
        .iter()
        .zip(golds)
        .map(|(r, g)| match r.first_gold_rank(g) {
            Some(rank) if rank <= 10 => 1.0 / rank as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / results.len() as f64)
}

/// NDCG@10 with linear gain and log2 discount, ideal DCG from qrels.
///
/// Queries without judgments are skipped; it is an error if none of the
/// queries has any.
pub fn ndcg_at_10(
    results: &[SearchResult],
    qrels: &[HashMap<String, u32>],
) -> Result<f64> {
    if results.len() != qrels.len() {
        return Err(Error::Argument("results and qrels lengths differ".to_string()));
    }
    let mut total = 0.0f64;
    let mut judged = 0usize;
    for (result, rels) in results.iter().zip(qrels) {
        if rels.is_empty() {
            continue;
        }
        judged += 1;
        let dcg: f64 = result
            .entries
            .iter()
            .take(10)
            .enumerate()
            .map(|(i, (id, _))| {
                let gain = rels.get(id).copied().unwrap_or(0) as f64;
                gain / ((i + 2) as f64).log2()
            })
            .sum();
        let mut ideal: Vec<u32> = rels.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(10)
            .enumerate()
            .map(|(i, &r)| r as f64 / ((i + 2) as f64).log2())
            .sum();
        total += dcg / idcg;
    }
    if judged == 0 {
        return Err(Error::Argument("no queries carry relevance judgments".to_string()));
    }
    Ok(total / judged as f64)
}

fn check_aligned(results: &[SearchResult], golds: &[HashSet<String>]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Argument("empty query set".to_string()));
    }
    if results.len() != golds.len() {
        return Err(Error::Argument("results and golds lengths differ".to_string()));
    }
    Ok(())
}

/// Mean L2 norm of the matrix rows, the passage-norm scale used in the
/// margin denominator.
pub fn mean_passage_norm(matrix: &EmbeddingMatrix) -> Result<f64> {
    if matrix.num_rows == 0 {
        return Err(Error::Argument("empty matrix".to_string()));
    }
    let total: f64 = matrix
        .rows()
        .map(|row| row.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt())
        .sum();
    Ok(total / matrix.num_rows as f64)
}

/// Normalized gap between the gold score and the k-th best non-gold
/// score. The gold is the pair's first positive; all positives are
/// excluded from the non-gold pool.
pub fn topk_margin(
    ensemble: &Ensemble,
    pair: &TrainPair,
    corpus: &Corpus,
    exact_results: &SearchResult,
    k: usize,
    mu_c: f64,
) -> Result<f64> {
    let q = ensemble_embed(ensemble, &pair.query_text, Side::Query);
    let q_norm = q.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
    if q_norm == 0.0 {
        return Err(Error::Numeric(format!(
            "query '{}' has a zero embedding norm",
            pair.query_id
        )));
    }
    if mu_c <= 0.0 {
        return Err(Error::Numeric("mean passage norm must be positive".to_string()));
    }

    let gold_row = corpus.row_of(&pair.positive_ids[0]).ok_or_else(|| {
        Error::Validation(format!(
            "query '{}' references unknown passage '{}'",
            pair.query_id, pair.positive_ids[0]
        ))
    })?;
    let gold_vec = ensemble_embed(ensemble, &corpus.get(gold_row).full_text(), Side::Passage);
    let gold_score = f64::from(crate::index::dot(&q, &gold_vec));

    let golds: HashSet<&str> = pair.positive_ids.iter().map(String::as_str).collect();
    let kth_non_gold = exact_results
        .entries
        .iter()
        .filter(|(id, _)| !golds.contains(id.as_str()))
        .nth(k - 1)
        .ok_or_else(|| {
            Error::Argument(format!(
                "results cover fewer than {k} non-gold passages for query '{}'",
                pair.query_id
            ))
        })?;

    Ok((gold_score - f64::from(kth_non_gold.1)) / (q_norm * mu_c))
}

/// Margin quantiles per round of the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginRow {
    pub round: usize,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Recompute top-k margins for each prefix ensemble (rounds 1..=R) and
/// report the 50th/75th/90th percentiles per round. Queries with a zero
/// embedding norm are logged and skipped.
pub fn margin_quantiles(
    ensemble: &Ensemble,
    pairs: &[TrainPair],
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<MarginRow>> {
    if pairs.is_empty() {
        return Err(Error::Argument("empty query set".to_string()));
    }
    let feats = CorpusFeatures::build(corpus, ensemble.featurizer());
    let mut rows = Vec::with_capacity(ensemble.len());

    for round in 1..=ensemble.len() {
        let prefix = ensemble.prefix(round);
        let matrix = ensemble_corpus_matrix(&prefix, &feats);
        let mu_c = mean_passage_norm(&matrix)?;

        let margins: Vec<Result<f64>> = pairs
            .par_iter()
            .map(|pair| {
                let q = ensemble_embed(&prefix, &pair.query_text, Side::Query);
                let depth = (k + pair.positive_ids.len()).min(matrix.num_rows);
                let results = exact_search(&matrix, &q, depth)?;
                topk_margin(&prefix, pair, corpus, &results, k, mu_c)
            })
            .collect();

        let mut values = Vec::with_capacity(pairs.len());
        for (pair, m) in pairs.iter().zip(margins) {
            match m {
                Ok(v) => values.push(v),
                Err(e) => log::warn!("margin skipped for query '{}': {e}", pair.query_id),
            }
        }
        if values.is_empty() {
            return Err(Error::Numeric(format!(
                "no computable margins at round {round}"
            )));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(MarginRow {
            round,
            p50: quantile(&values, 0.50),
            p75: quantile(&values, 0.75),
            p90: quantile(&values, 0.90),
        });
    }
    Ok(rows)
}

/// One row of the probes sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub n_probes: usize,
    pub metric: f64,
    pub recall_vs_exact: f64,
}

/// Sweep `n_probes` over an IVF index, reporting R@k against golds and
/// the per-query overlap with exact search.
pub fn probe_sweep(
    ivf: &IvfIndex,
    matrix: &EmbeddingMatrix,
    queries: &[Vec<f32>],
    golds: &[HashSet<String>],
    k: usize,
    probe_list: &[usize],
) -> Result<Vec<ProbeRow>> {
    if queries.is_empty() {
        return Err(Error::Argument("empty query set".to_string()));
    }
    if queries.len() != golds.len() {
        return Err(Error::Argument("queries and golds lengths differ".to_string()));
    }
    let exact: Vec<SearchResult> = queries
        .par_iter()
        .map(|q| exact_search(matrix, q, k))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(probe_list.len());
    for &n_probes in probe_list {
        let approx: Vec<SearchResult> = queries
            .par_iter()
            .map(|q| ivf_search(ivf, matrix, q, k, n_probes))
            .collect::<Result<Vec<_>>>()?;
        let metric = recall_at_k(&approx, golds, k)?;
        let overlap: f64 = approx
            .iter()
            .zip(&exact)
            .map(|(a, e)| {
                let exact_ids: HashSet<&str> = e.ids().collect();
                let inter = a.ids().filter(|id| exact_ids.contains(id)).count();
                inter as f64 / exact_ids.len().max(1) as f64
            })
            .sum::<f64>()
            / queries.len() as f64;
        rows.push(ProbeRow {
            n_probes,
            metric,
            recall_vs_exact: overlap,
        });
    }
    Ok(rows)
}

/// Summary metrics plus per-query detail for report files.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// metric name -> value in [0, 1], e.g. "r@20" or "mrr@10".
    pub metrics: std::collections::BTreeMap<String, f64>,
    pub per_query: Vec<PerQueryRow>,
}

#[derive(Debug, Clone)]
pub struct PerQueryRow {
    pub query_id: String,
    /// 1-based rank of the first gold, if retrieved at all.
    pub first_gold_rank: Option<usize>,
}

/// Compute R@k for each requested k, MRR@10, and NDCG@10 when qrels are
/// available.
pub fn evaluate_results(
    query_ids: &[String],
    results: &[SearchResult],
    golds: &[HashSet<String>],
    ks: &[usize],
    qrels: Option<&[HashMap<String, u32>]>,
) -> Result<EvalReport> {
    check_aligned(results, golds)?;
    let mut metrics = std::collections::BTreeMap::new();
    for &k in ks {
        metrics.insert(format!("r@{k}"), recall_at_k(results, golds, k)?);
    }
    metrics.insert("mrr@10".to_string(), mrr_at_10(results, golds)?);
    if let Some(qrels) = qrels {
        metrics.insert("ndcg@10".to_string(), ndcg_at_10(results, qrels)?);
    }
    let per_query = query_ids
        .iter()
        .zip(results.iter().zip(golds))
        .map(|(qid, (r, g))| PerQueryRow {
            query_id: qid.clone(),
            first_gold_rank: r.first_gold_rank(g),
        })
        .collect();
    Ok(EvalReport { metrics, per_query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boosting;
    use crate::data::Passage;
    use crate::encoder::EncoderModel;
    use crate::featurizer::FeaturizerConfig;

    fn result(ids: &[&str]) -> SearchResult {
        SearchResult {
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), 1.0 - i as f32 * 0.01))
                .collect(),
        }
    }

    fn gold(ids: &[&str]) -> HashSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_hits_and_misses() {
        let results = vec![result(&["a", "b"]), result(&["c", "d"])];
        let golds = vec![gold(&["a"]), gold(&["d"])];
        assert_eq!(recall_at_k(&results, &golds, 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&results, &golds, 1).unwrap(), 0.5);
        let misses = vec![gold(&["zz"]), gold(&["yy"])];
        assert_eq!(recall_at_k(&results, &misses, 2).unwrap(), 0.0);
    }

    #[test]
    fn recall_with_hand_enumerated_ranks() {
        // Golds at ranks 1, 5, and 30 with k = 20 hit for two of three.
        let ranked: Vec<String> = (0..40).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = ranked.iter().map(String::as_str).collect();
        let results = vec![result(&refs), result(&refs), result(&refs)];
        let golds = vec![gold(&["p0"]), gold(&["p4"]), gold(&["p29"])];
        let r = recall_at_k(&results, &golds, 20).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mrr_counts_only_top_ten() {
        let ranked: Vec<String> = (0..25).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = ranked.iter().map(String::as_str).collect();
        let results = vec![result(&refs), result(&refs), result(&refs)];
        // Ranks 1, 2, and 20: contributions 1, 0.5, 0.
        let golds = vec![gold(&["p0"]), gold(&["p1"]), gold(&["p19"])];
        let mrr = mrr_at_10(&results, &golds).unwrap();
        assert!((mrr - 0.5).abs() < 1e-12);

        let rank11 = vec![gold(&["p10"])];
        assert_eq!(mrr_at_10(&results[..1], &rank11).unwrap(), 0.0);
    }

    #[test]
    fn metrics_reject_empty_query_sets() {
        assert!(recall_at_k(&[], &[], 5).is_err());
        assert!(mrr_at_10(&[], &[]).is_err());
    }

    #[test]
    fn recall_non_decreasing_in_k_and_bounds_mrr() {
        let ranked: Vec<String> = (0..30).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = ranked.iter().map(String::as_str).collect();
        let results = vec![result(&refs), result(&refs), result(&refs)];
        let golds = vec![gold(&["p3"]), gold(&["p11"]), gold(&["p0"])];
        let mut prev = 0.0;
        for k in 1..=30 {
            let r = recall_at_k(&results, &golds, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        let mrr = mrr_at_10(&results, &golds).unwrap();
        let r10 = recall_at_k(&results, &golds, 10).unwrap();
        assert!(mrr <= r10);
    }

    #[test]
    fn ndcg_perfect_and_zero() {
        let results = vec![result(&["a", "b", "c"])];
        let perfect: Vec<HashMap<String, u32>> =
            vec![[("a".to_string(), 3u32), ("b".to_string(), 2)].into_iter().collect()];
        assert!((ndcg_at_10(&results, &perfect).unwrap() - 1.0).abs() < 1e-12);

        let irrelevant: Vec<HashMap<String, u32>> =
            vec![[("zz".to_string(), 3u32)].into_iter().collect()];
        assert_eq!(ndcg_at_10(&results, &irrelevant).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_matches_hand_enumeration() {
        // Rels {3, 2} retrieved in the order {2, 3}.
        let results = vec![result(&["b", "a"])];
        let qrels: Vec<HashMap<String, u32>> =
            vec![[("a".to_string(), 3u32), ("b".to_string(), 2)].into_iter().collect()];
        let got = ndcg_at_10(&results, &qrels).unwrap();
        let dcg = 2.0 / 2.0f64.log2() + 3.0 / 3.0f64.log2();
        let idcg = 3.0 / 2.0f64.log2() + 2.0 / 3.0f64.log2();
        assert!((got - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn ndcg_needs_some_judgments() {
        let results = vec![result(&["a"])];
        let empty: Vec<HashMap<String, u32>> = vec![HashMap::new()];
        assert!(ndcg_at_10(&results, &empty).is_err());
    }

    fn tiny_corpus() -> (Corpus, Ensemble) {
        let passages = vec![
            ("p0", "winter storms and heavy snowfall"),
            ("p1", "summer heat waves on the coast"),
            ("p2", "autumn harvest in the valley"),
            ("p3", "spring rain over the plains"),
            ("p4", "desert winds and dry canyons"),
        ];
        let corpus = Corpus::from_passages(
            passages
                .into_iter()
                .map(|(id, text)| Passage {
                    id: id.to_string(),
                    title: String::new(),
                    text: text.to_string(),
                })
                .collect(),
        )
        .unwrap();
        let featurizer = FeaturizerConfig {
            num_buckets: 1 << 10,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 11,
        };
        let mut ensemble = Ensemble::new(EncoderModel::random(featurizer.clone(), 4, 1).unwrap());
        ensemble
            .push(EncoderModel::random(featurizer, 4, 2).unwrap())
            .unwrap();
        (corpus, ensemble)
    }

    #[test]
    fn margin_matches_rescan_oracle() {
        let (corpus, ensemble) = tiny_corpus();
        let pair = TrainPair {
            query_id: "q".into(),
            query_text: "winter snowfall".into(),
            positive_ids: vec!["p0".into()],
        };
        let matrix = boosting::embed_corpus_ensemble(&ensemble, &corpus);
        let mu_c = mean_passage_norm(&matrix).unwrap();
        let q = ensemble_embed(&ensemble, &pair.query_text, Side::Query);
        let results = exact_search(&matrix, &q, 5).unwrap();
        let k = 2;
        let got = topk_margin(&ensemble, &pair, &corpus, &results, k, mu_c).unwrap();

        // Hand-rolled rescan: score every passage, drop the gold, take
        // the kth best of the rest.
        let mut scores: Vec<(usize, f64)> = (0..corpus.len())
            .map(|row| {
                (
                    row,
                    f64::from(boosting::ensemble_score(
                        &ensemble,
                        &pair.query_text,
                        &corpus.get(row).full_text(),
                    )),
                )
            })
            .collect();
        let gold_score = scores[0].1;
        scores.remove(0);
        scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let kth = scores[k - 1].1;
        let q_norm = q.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        let want = (gold_score - kth) / (q_norm * mu_c);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn equal_gold_and_top_nongold_means_zero_margin() {
        let (corpus, _) = tiny_corpus();
        let featurizer = FeaturizerConfig {
            num_buckets: 1 << 10,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 11,
        };
        // Constant nonzero model: every embedding equals ln_bias, so all
        // scores tie and the k=1 margin is exactly zero.
        let mut model = EncoderModel::zeros(featurizer, 4).unwrap();
        model.ln_bias = vec![1.0, 0.0, 0.0, 0.0];
        let ensemble = Ensemble::new(model);
        let pair = TrainPair {
            query_id: "q".into(),
            query_text: "anything".into(),
            positive_ids: vec!["p0".into()],
        };
        let matrix = boosting::embed_corpus_ensemble(&ensemble, &corpus);
        let mu_c = mean_passage_norm(&matrix).unwrap();
        let q = ensemble_embed(&ensemble, &pair.query_text, Side::Query);
        let results = exact_search(&matrix, &q, 5).unwrap();
        let margin = topk_margin(&ensemble, &pair, &corpus, &results, 1, mu_c).unwrap();
        assert_eq!(margin, 0.0);
    }

    #[test]
    fn zero_query_norm_is_reported() {
        let (corpus, ensemble) = tiny_corpus();
        let pair = TrainPair {
            query_id: "empty-query".into(),
            query_text: String::new(),
            positive_ids: vec!["p0".into()],
        };
        let matrix = boosting::embed_corpus_ensemble(&ensemble, &corpus);
        let mu_c = mean_passage_norm(&matrix).unwrap();
        let q = ensemble_embed(&ensemble, &pair.query_text, Side::Query);
        let results = exact_search(&matrix, &q, 5).unwrap();
        let err = topk_margin(&ensemble, &pair, &corpus, &results, 1, mu_c).unwrap_err();
        assert!(err.to_string().contains("empty-query"), "{err}");
    }

    #[test]
    fn margin_quantile_rows_are_ordered() {
        let (corpus, ensemble) = tiny_corpus();
        let pairs: Vec<TrainPair> = (0..corpus.len())
            .map(|i| TrainPair {
                query_id: format!("q{i}"),
                query_text: corpus.get(i).full_text(),
                positive_ids: vec![corpus.get(i).id.clone()],
            })
            .collect();
        let rows = margin_quantiles(&ensemble, &pairs, &corpus, 2).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.p50 <= row.p75 && row.p75 <= row.p90, "{row:?}");
        }

        let one_round = margin_quantiles(&ensemble.prefix(1), &pairs, &corpus, 2).unwrap();
        assert_eq!(one_round.len(), 1);
        assert_eq!(one_round[0], rows[0]);
    }

    #[test]
    fn probe_sweep_saturates_to_exact() {
        use crate::index::build_ivf;
        let (corpus, ensemble) = tiny_corpus();
        let matrix = boosting::embed_corpus_ensemble(&ensemble, &corpus);
        let ivf = build_ivf(&matrix, 3, 10, 0).unwrap();
        let queries: Vec<Vec<f32>> = (0..corpus.len())
            .map(|i| ensemble_embed(&ensemble, &corpus.get(i).full_text(), Side::Query))
            .collect();
        let golds: Vec<HashSet<String>> = (0..corpus.len())
            .map(|i| [corpus.get(i).id.clone()].into_iter().collect())
            .collect();

        let rows = probe_sweep(&ivf, &matrix, &queries, &golds, 2, &[1, 2, 3]).unwrap();
        assert_eq!(rows.len(), 3);
        for w in rows.windows(2) {
            assert!(w[1].recall_vs_exact >= w[0].recall_vs_exact);
        }
        let full = &rows[2];
        assert_eq!(full.recall_vs_exact, 1.0);

        // The full-probe row reproduces the exact-search metric.
        let exact_results: Vec<SearchResult> = queries
            .iter()
            .map(|q| exact_search(&matrix, q, 2).unwrap())
            .collect();
        let exact_metric = recall_at_k(&exact_results, &golds, 2).unwrap();
        assert_eq!(full.metric, exact_metric);
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let values = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&values, 0.0), 0.0);
        assert_eq!(quantile(&values, 1.0), 3.0);
        assert!((quantile(&values, 0.5) - 1.5).abs() < 1e-12);
        assert!((quantile(&values, 0.75) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn report_collects_requested_metrics() {
        let results = vec![result(&["a", "b"]), result(&["c", "d"])];
        let golds = vec![gold(&["b"]), gold(&["zz"])];
        let ids = vec!["q1".to_string(), "q2".to_string()];
        let report = evaluate_results(&ids, &results, &golds, &[1, 2], None).unwrap();
        assert_eq!(report.metrics["r@1"], 0.0);
        assert_eq!(report.metrics["r@2"], 0.5);
        assert!(report.metrics.contains_key("mrr@10"));
        assert!(!report.metrics.contains_key("ndcg@10"));
        assert_eq!(report.per_query[0].first_gold_rank, Some(2));
        assert_eq!(report.per_query[1].first_gold_rank, None);
        for v in report.metrics.values() {
            assert!((0.0..=1.0).contains(v));
        }
    }
}
