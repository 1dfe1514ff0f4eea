//! Distill a multi-encoder ensemble into one full-width query encoder
//! and verify it retrieves against the unchanged passage index.
//!
//! Run with: cargo run --release --example distill_encoder

use std::collections::HashSet;

use drboost::boosting::{
    ensemble_corpus_matrix, ensemble_embed, run_boosting, BoostConfig, BoostMode, CorpusFeatures,
    DevMetric, Side,
};
use drboost::distill::{distill, DistillConfig};
use drboost::encoder::TrainConfig;
use drboost::eval::recall_at_k;
use drboost::featurizer::FeaturizerConfig;
use drboost::index::{exact_search, SearchResult};
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
    println!(
        "source ensemble: {} components, {} total dims; distilling the query side",
        ensemble.len(),
        ensemble.total_dim()
    );

    let outcome = distill(
        &ensemble,
        &dataset.train,
        &dataset.dev,
        &dataset.corpus,
        &DistillConfig {
            epochs: 30,
            ..Default::default()
        },
    )?;
    println!(
        "distilled encoder: dim {}, best epoch {}, dev regression loss {:.5}",
        outcome.model.dim, outcome.best_epoch, outcome.best_dev_loss
    );

    // The passage index stays exactly as the ensemble built it; only the
    // query encoder is swapped.
    let feats = CorpusFeatures::build(&dataset.corpus, &featurizer);
    let matrix = ensemble_corpus_matrix(&ensemble, &feats);
    let golds: Vec<HashSet<String>> = dataset
        .dev
        .iter()
        .map(|p| p.positive_ids.iter().cloned().collect())
        .collect();

    let by_ensemble: Vec<SearchResult> = dataset
        .dev
        .iter()
        .map(|p| {
            let q = ensemble_embed(&ensemble, &p.query_text, Side::Query);
            exact_search(&matrix, &q, 20)
        })
        .collect::<drboost::Result<_>>()?;
    let by_distilled: Vec<SearchResult> = dataset
        .dev
        .iter()
        .map(|p| {
            let q = drboost::encoder::embed(&outcome.model, &p.query_text);
            exact_search(&matrix, &q, 20)
        })
        .collect::<drboost::Result<_>>()?;

    println!(
        "dev R@20: ensemble {:.4} vs distilled {:.4} (one forward pass per query)",
        recall_at_k(&by_ensemble, &golds, 20)?,
        recall_at_k(&by_distilled, &golds, 20)?
    );
    Ok(())
}
