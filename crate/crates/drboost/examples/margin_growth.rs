//! Track top-20 margin quantiles across boosting rounds on the
//! training set; growing margins are the signature of boosting.
//!
//! Run with: cargo run --release --example margin_growth

use drboost::boosting::{run_boosting, BoostConfig, BoostMode, DevMetric};
use drboost::encoder::TrainConfig;
use drboost::eval::margin_quantiles;
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

    println!("top-20 margins on the training set, by ensemble prefix:\n");
    println!("round  p50       p75       p90");
    for row in margin_quantiles(&ensemble, &dataset.train, &dataset.corpus, 20)? {
        println!(
            "{:>5}  {:>8.5}  {:>8.5}  {:>8.5}",
            row.round, row.p50, row.p75, row.p90
        );
    }
    Ok(())
}
