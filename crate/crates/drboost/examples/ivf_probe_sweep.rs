//! Build an IVF index over ensemble embeddings and sweep the number of
//! probed clusters, printing the accuracy/speed trade-off curve.
//!
//! Run with: cargo run --release --example ivf_probe_sweep

use std::collections::HashSet;

use drboost::boosting::{
    ensemble_corpus_matrix, ensemble_embed, run_boosting, BoostConfig, BoostMode, CorpusFeatures,
    DevMetric, Side,
};
use drboost::encoder::TrainConfig;
use drboost::eval::probe_sweep;
use drboost::featurizer::FeaturizerConfig;
use drboost::index::{build_ivf, default_clusters};
use drboost::synthgen::{generate, SynthConfig};

fn main() -> drboost::Result<()> {
    let dataset = generate(&SynthConfig {
        num_topics: 8,
        passages_per_topic: 250,
        vocab_size: 1800,
        words_per_passage: 40,
        queries_per_topic: 50,
        query_len: 6,
        noise_rate: 0.35,
        dev_fraction: 0.2,
        seed: 7,
    })?;
    let featurizer = FeaturizerConfig {
        num_buckets: 1 << 14,
        use_bigrams: true,
        lowercase: true,
        hash_seed: 7,
    };
    let boost_cfg = BoostConfig {
        featurizer: featurizer.clone(),
        max_rounds: 3,
        tolerance: 0.0,
        dim_per_round: 8,
        dev_metric: DevMetric::RecallAt(10),
        mode: BoostMode::Boost,
        seed: 7,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 6,
        ..Default::default()
    };
    let (ensemble, _) = run_boosting(
        &dataset.train,
        &dataset.dev,
        &dataset.corpus,
        &boost_cfg,
        &train_cfg,
    )?;

    let feats = CorpusFeatures::build(&dataset.corpus, &featurizer);
    let matrix = ensemble_corpus_matrix(&ensemble, &feats);
    let clusters = default_clusters(matrix.num_rows);
    let ivf = build_ivf(&matrix, clusters, 20, 7)?;
    println!(
        "{} rows at dim {}, {} clusters",
        matrix.num_rows, matrix.dim, clusters
    );

    let queries: Vec<Vec<f32>> = dataset
        .dev
        .iter()
        .map(|p| ensemble_embed(&ensemble, &p.query_text, Side::Query))
        .collect();
    let golds: Vec<HashSet<String>> = dataset
        .dev
        .iter()
        .map(|p| p.positive_ids.iter().cloned().collect())
        .collect();

    let mut probes = vec![];
    let mut v = 1;
    while v < clusters {
        probes.push(v);
        v *= 2;
    }
    probes.push(clusters);

    println!("\nn_probes   R@10   recall-vs-exact");
    for row in probe_sweep(&ivf, &matrix, &queries, &golds, 10, &probes)? {
        println!(
            "{:>8}  {:>5.3}  {:>15.3}",
            row.n_probes, row.metric, row.recall_vs_exact
        );
    }
    Ok(())
}
