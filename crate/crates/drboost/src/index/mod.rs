//! Corpus-side search structures.
//!
//! Three variants over the same row-major embedding matrix: exhaustive
//! inner-product scan ([`exact_search`]), an inverted file index with a
//! k-means coarse quantizer ([`ivf`]), and product-quantized compressed
//! search ([`pq`]). All searches rank by descending score with ties
//! broken by ascending row index, so results are deterministic and the
//! full-probe IVF search is element-wise identical to the exact scan.

pub mod ivf;
pub mod kmeans;
pub mod pq;

pub use ivf::{build_ivf, default_clusters, ivf_search, IvfIndex};
pub use kmeans::kmeans;
pub use pq::{build_pq, pq_search, reconstruction_error, PqIndex};

use crate::error::{Error, Result};

/// Dense row-major f32 embedding matrix with aligned passage ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub num_rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub row_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, row_ids: Vec<String>) -> Result<Self> {
        let num_rows = row_ids.len();
        if data.len() != num_rows * dim {
            return Err(Error::Argument(format!(
                "matrix data length {} does not match {num_rows} rows x {dim} dims",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".to_string()));
        }
        Ok(EmbeddingMatrix {
            num_rows,
            dim,
            data,
            row_ids,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Ranked search output: (passage id, score), descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub entries: Vec<(String, f32)>,
}

impl SearchResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// 1-based rank of the first entry whose id is in `golds`.
    pub fn first_gold_rank(&self, golds: &std::collections::HashSet<String>) -> Option<usize> {
        self.entries
            .iter()
            .position(|(id, _)| golds.contains(id))
            .map(|p| p + 1)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Global ranking rule: higher score first, lower row index on ties.
#[inline]
pub(crate) fn rank_order(a: &(usize, f32), b: &(usize, f32)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .expect("scores are finite")
        .then_with(|| a.0.cmp(&b.0))
}

/// Keep the best `k` of `scored` under the global rule, sorted.
pub(crate) fn select_top_k(mut scored: Vec<(usize, f32)>, k: usize) -> Vec<(usize, f32)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

pub(crate) fn to_search_result(
    ranked: Vec<(usize, f32)>,
    row_ids: &[String],
) -> SearchResult {
    SearchResult {
        entries: ranked
            .into_iter()
            .map(|(row, score)| (row_ids[row].clone(), score))
            .collect(),
    }
}

/// Exhaustive top-k inner-product search.
pub fn exact_search(matrix: &EmbeddingMatrix, query: &[f32], k: usize) -> Result<SearchResult> {
    let ranked = exact_search_rows(matrix, query, k)?;
    Ok(to_search_result(ranked, &matrix.row_ids))
}

/// Same as [`exact_search`] but returning row indices, for callers that
/// work with positions rather than ids.
pub fn exact_search_rows(
    matrix: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    if query.len() != matrix.dim {
        return Err(Error::Argument(format!(
            "query dim {} does not match matrix dim {}",
            query.len(),
            matrix.dim
        )));
    }
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".to_string()));
    }
    let scored: Vec<(usize, f32)> = matrix
        .rows()
        .enumerate()
        .map(|(i, row)| (i, dot(query, row)))
        .collect();
    Ok(select_top_k(scored, k))
}
