//! Boosted dense retrieval at desk scale.
//!
//! This crate trains an ensemble of low-dimensional linear bi-encoders
//! ("weak learners") sequentially, each round focusing on the retrieval
//! mistakes of the current ensemble, and serves the result as a single
//! concatenated-vector MIPS index. Exact, IVF, and product-quantized
//! search variants are provided, along with an evaluation harness
//! (R@K, MRR@10, NDCG@10), top-k margin diagnostics, a query-encoder
//! distillation path, and a deterministic synthetic benchmark generator.
//!
//! The high-level flow is:
//!
//! 1. [`synthgen`] or your own JSONL files provide a corpus and gold pairs.
//! 2. [`boosting::run_boosting`] trains the ensemble round by round,
//!    mining hard negatives from its own retrieval distribution.
//! 3. [`encoder::embed_corpus`] / [`boosting::ensemble_corpus_matrix`]
//!    produce the passage-side matrix, which [`index`] turns into an
//!    exact, IVF, or PQ search structure.
//! 4. [`eval`] scores the results and produces margin / probe-sweep
//!    diagnostics.
//!
//! Every entry point is deterministic under fixed seeds, independent of
//! worker-thread count. See the `examples/` directory for one runnable
//! program per capability; the `drboost` binary exposes the same
//! pipeline as subcommands.

pub mod boosting;
pub mod cli;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod featurizer;
pub mod index;
pub mod io;
pub mod synthgen;

mod rng;

pub use error::{Error, Result};
