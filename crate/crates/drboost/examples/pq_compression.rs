//! Compress an embedding matrix with product quantization and measure
//! the memory/recall trade-off at two subvector widths.
//!
//! Run with: cargo run --release --example pq_compression

use std::collections::HashSet;

use drboost::boosting::{
    ensemble_corpus_matrix, ensemble_embed, run_boosting, BoostConfig, BoostMode, CorpusFeatures,
    DevMetric, Side,
};
use drboost::encoder::TrainConfig;
use drboost::featurizer::FeaturizerConfig;
use drboost::index::{build_pq, exact_search, pq_search, reconstruction_error};
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
    let raw_bytes = matrix.dim * 4;
    println!("raw vectors: dim {} = {raw_bytes} bytes each", matrix.dim);

    let queries: Vec<Vec<f32>> = dataset
        .dev
        .iter()
        .map(|p| ensemble_embed(&ensemble, &p.query_text, Side::Query))
        .collect();

    println!("\nsub_dim  bytes/vec  compression  mse        recall@20-vs-exact");
    for sub_dim in [4usize, 8] {
        let pq = build_pq(&matrix, sub_dim, 7)?;
        let mse = reconstruction_error(&pq, &matrix);

        let mut overlap = 0.0f64;
        for q in &queries {
            let exact: HashSet<String> = exact_search(&matrix, q, 20)?
                .entries
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            let hits = pq_search(&pq, q, 20)?
                .entries
                .iter()
                .filter(|(id, _)| exact.contains(id))
                .count();
            overlap += hits as f64 / exact.len() as f64;
        }
        overlap /= queries.len() as f64;

        println!(
            "{:>7}  {:>9}  {:>10}x  {:<9.6}  {:>18.3}",
            sub_dim,
            pq.bytes_per_vector(),
            raw_bytes / pq.bytes_per_vector(),
            mse,
            overlap
        );
    }
    Ok(())
}
