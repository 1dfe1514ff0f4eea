//! Inverted file index over a k-means coarse quantizer.
//!
//! Rows are clustered offline by L2 distance; at query time the
//! `n_probes` centroids with the highest inner product against the query
//! are visited and the union of their lists is scanned exactly. With
//! `n_probes = K` the result is element-wise identical to
//! [`exact_search`](crate::index::exact_search).

use crate::error::{Error, Result};
use crate::index::kmeans::{assign_rows, kmeans, Centroids};
use crate::index::{dot, select_top_k, to_search_result, EmbeddingMatrix, SearchResult};

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub centroids: Centroids,
    /// One list per centroid; together they partition the row set.
    pub lists: Vec<Vec<u32>>,
}

impl IvfIndex {
    pub fn k(&self) -> usize {
        self.centroids.k
    }
}

/// Conventional default cluster count for an `n`-row corpus.
pub fn default_clusters(num_rows: usize) -> usize {
    ((num_rows as f64).sqrt().round() as usize).max(1)
}

/// Cluster the matrix and assign every row to its nearest centroid.
pub fn build_ivf(
    matrix: &EmbeddingMatrix,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<IvfIndex> {
    let centroids = kmeans(matrix, k, iters, seed)?;
    let assignment = assign_rows(matrix, &centroids);
    let mut lists = vec![Vec::new(); k];
    for (row, &c) in assignment.iter().enumerate() {
        lists[c].push(row as u32);
    }
    Ok(IvfIndex { centroids, lists })
}

/// Top-k inner-product search restricted to the `n_probes` best clusters.
pub fn ivf_search(
    index: &IvfIndex,
    matrix: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
    n_probes: usize,
) -> Result<SearchResult> {
    let ranked = ivf_search_rows(index, matrix, query, k, n_probes)?;
    Ok(to_search_result(ranked, &matrix.row_ids))
}

pub fn ivf_search_rows(
    index: &IvfIndex,
    matrix: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
    n_probes: usize,
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
    if n_probes == 0 || n_probes > index.k() {
        return Err(Error::Argument(format!(
            "n_probes must be in [1, {}], got {n_probes}",
            index.k()
        )));
    }

    // Probe selection: highest inner product, ties to the lower index.
    let centroid_scores: Vec<(usize, f32)> = (0..index.k())
        .map(|c| (c, dot(query, index.centroids.row(c))))
        .collect();
    let probes = select_top_k(centroid_scores, n_probes);

    let mut scored: Vec<(usize, f32)> = Vec::new();
    for (c, _) in probes {
        for &row in &index.lists[c] {
            let row = row as usize;
            scored.push((row, dot(query, matrix.row(row))));
        }
    }
    Ok(select_top_k(scored, k))
}
