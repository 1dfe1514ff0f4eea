//! Generate a small synthetic retrieval benchmark and write it to disk
//! in the standard JSONL/TSV layout.
//!
//! Run with: cargo run --release --example generate_dataset

use drboost::synthgen::{generate, write_dataset, SynthConfig};

fn main() -> drboost::Result<()> {
    let config = SynthConfig {
        num_topics: 8,
        passages_per_topic: 250,
        vocab_size: 1800,
        words_per_passage: 40,
        queries_per_topic: 50,
        query_len: 6,
        noise_rate: 0.35,
        dev_fraction: 0.2,
        seed: 7,
    };
    let dataset = generate(&config)?;

    let out = std::env::temp_dir().join("drboost-example-data");
    write_dataset(&dataset, &out)?;

    println!(
        "wrote {} passages, {} train and {} dev queries to {}",
        dataset.corpus.len(),
        dataset.train.len(),
        dataset.dev.len(),
        out.display()
    );
    println!("files: corpus.jsonl, train.jsonl, dev.jsonl, topics.tsv");

    let example = dataset.corpus.get(0);
    println!("\nfirst passage ({}):\n  {}", example.id, example.text);
    let query = &dataset.train[0];
    println!("first query ({}):\n  {}", query.query_id, query.query_text);
    Ok(())
}
