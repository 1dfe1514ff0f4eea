//! Train a boosted ensemble of low-dimensional encoders and watch the
//! dev metric improve round by round.
//!
//! Run with: cargo run --release --example train_boosted

use drboost::boosting::{run_boosting, BoostConfig, BoostMode, DevMetric};
use drboost::encoder::TrainConfig;
use drboost::featurizer::FeaturizerConfig;
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

    let boost_cfg = BoostConfig {
        featurizer: FeaturizerConfig {
            num_buckets: 1 << 14,
            use_bigrams: true,
            lowercase: true,
            hash_seed: 7,
        },
        max_rounds: 4,
        tolerance: 0.0,
        dim_per_round: 8,
        negatives_n: 8,
        mine_top_n: 100,
        mine_temperature: 1.0,
        dev_metric: DevMetric::RecallAt(10),
        mode: BoostMode::Boost,
        seed: 7,
    };
    let train_cfg = TrainConfig {
        epochs: 6,
        batch_size: 32,
        ..Default::default()
    };

    let (ensemble, history) = run_boosting(
        &dataset.train,
        &dataset.dev,
        &dataset.corpus,
        &boost_cfg,
        &train_cfg,
    )?;

    println!("round  total_dim  dev R@10   train NLL");
    for record in &history {
        println!(
            "{:>5}  {:>9}  {:>8.4}  {:>9.4}",
            record.round,
            record.round * boost_cfg.dim_per_round,
            record.dev_metric,
            record.train_nll
        );
    }
    println!(
        "\nselected ensemble: {} components, {} total dims",
        ensemble.len(),
        ensemble.total_dim()
    );
    Ok(())
}
