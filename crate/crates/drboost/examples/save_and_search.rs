//! Persist a trained ensemble and its indexes, reload them, and search:
//! the round trip every deployment goes through.
//!
//! Run with: cargo run --release --example save_and_search

use drboost::boosting::{
    embed_corpus_ensemble, ensemble_embed, run_boosting, BoostConfig, BoostMode, DevMetric, Side,
};
use drboost::encoder::TrainConfig;
use drboost::featurizer::FeaturizerConfig;
use drboost::index::{build_ivf, default_clusters, ivf_search};
use drboost::io;
use drboost::synthgen::{generate, SynthConfig};

fn main() -> drboost::Result<()> {
    let dataset = generate(&SynthConfig {
        num_topics: 6,
        passages_per_topic: 200,
        vocab_size: 1400,
        words_per_passage: 40,
        queries_per_topic: 40,
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
        max_rounds: 2,
        tolerance: 0.0,
        dim_per_round: 8,
        dev_metric: DevMetric::RecallAt(10),
        mode: BoostMode::Boost,
        seed: 7,
        ..Default::default()
    };
    let (ensemble, _) = run_boosting(
        &dataset.train,
        &dataset.dev,
        &dataset.corpus,
        &boost_cfg,
        &TrainConfig {
            epochs: 5,
            ..Default::default()
        },
    )?;

    let dir = std::env::temp_dir().join("drboost-example-artifacts");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let model_path = dir.join("model.drbe");
    let index_path = dir.join("index.drbx");

    io::save_ensemble(&ensemble, &model_path)?;
    let matrix = embed_corpus_ensemble(&ensemble, &dataset.corpus);
    let ivf = build_ivf(&matrix, default_clusters(matrix.num_rows), 20, 7)?;
    io::save_ivf_index(&matrix, &ivf, &index_path)?;
    println!(
        "saved {} ({} components) and {} ({} clusters)",
        model_path.display(),
        ensemble.len(),
        index_path.display(),
        ivf.k()
    );

    // Reload from disk and run a query.
    let reloaded = io::load_model_file(&model_path)?.into_ensemble();
    let (matrix, ivf) = match io::load_index(&index_path)? {
        io::IndexFile::Ivf(m, ivf) => (m, ivf),
        _ => unreachable!("just wrote an ivf index"),
    };

    let pair = &dataset.dev[0];
    let query_vec = ensemble_embed(&reloaded, &pair.query_text, Side::Query);
    let probes = (ivf.k() as f64).sqrt().round() as usize;
    let hits = ivf_search(&ivf, &matrix, &query_vec, 5, probes.max(1))?;

    println!("\nquery: {}\ngold:  {}\n", pair.query_text, pair.positive_ids[0]);
    for (rank, (id, score)) in hits.entries.iter().enumerate() {
        let marker = if pair.positive_ids.contains(id) { "  <- gold" } else { "" };
        println!("{:>2}. {id}  score {score:.4}{marker}", rank + 1);
    }
    Ok(())
}
