//! Product quantization.
//!
//! Vectors are split into `dim / sub_dim` contiguous subvectors, each
//! subspace is clustered independently (up to 256 centroids so codes fit
//! in a byte), and every row is stored as one centroid id per subspace.
//! Search uses asymmetric distance computation: the uncompressed query
//! builds a per-subspace lookup table of inner products against the
//! codebook, and each row's score is the sum of `M` table entries.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::kmeans::kmeans;
use crate::index::{select_top_k, to_search_result, EmbeddingMatrix, SearchResult};
use crate::rng::derive_seed;

pub const CODEBOOK_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    pub dim: usize,
    pub sub_dim: usize,
    /// Centroids per subspace; 256 unless the matrix has fewer rows.
    pub num_centroids: usize,
    /// `num_subspaces x num_centroids x sub_dim`, row-major.
    pub codebooks: Vec<f32>,
    /// `num_rows x num_subspaces` centroid ids.
    pub codes: Vec<u8>,
    pub row_ids: Vec<String>,
}

impl PqIndex {
    pub fn num_subspaces(&self) -> usize {
        self.dim / self.sub_dim
    }

    pub fn num_rows(&self) -> usize {
        self.row_ids.len()
    }

    /// Bytes per stored vector (the code string).
    pub fn bytes_per_vector(&self) -> usize {
        self.num_subspaces()
    }

    fn codebook_entry(&self, subspace: usize, centroid: usize) -> &[f32] {
        let base = (subspace * self.num_centroids + centroid) * self.sub_dim;
        &self.codebooks[base..base + self.sub_dim]
    }

    /// Decode one row back to a full-width vector.
    pub fn reconstruct(&self, row: usize) -> Vec<f32> {
        let m = self.num_subspaces();
        let mut out = Vec::with_capacity(self.dim);
        for s in 0..m {
            let code = self.codes[row * m + s] as usize;
            out.extend_from_slice(self.codebook_entry(s, code));
        }
        out
    }
}

/// Train per-subspace codebooks and encode every row.
pub fn build_pq(matrix: &EmbeddingMatrix, sub_dim: usize, seed: u64) -> Result<PqIndex> {
    if sub_dim == 0 || matrix.dim % sub_dim != 0 {
        return Err(Error::Argument(format!(
            "sub_dim {sub_dim} must divide the embedding dim {}",
            matrix.dim
        )));
    }
    if matrix.num_rows == 0 {
        return Err(Error::Argument("cannot quantize an empty matrix".to_string()));
    }
    let m = matrix.dim / sub_dim;
    let num_centroids = CODEBOOK_SIZE.min(matrix.num_rows);

    // Each subspace trains independently on its column slice.
    let per_subspace: Vec<(Vec<f32>, Vec<u8>)> = (0..m)
        .into_par_iter()
        .map(|s| {
            let sub = subspace_matrix(matrix, s, sub_dim);
            let centroids = kmeans(&sub, num_centroids, 20, derive_seed(seed, s as u64))
                .expect("k <= rows by construction");
            let codes: Vec<u8> = (0..sub.num_rows)
                .map(|row| {
                    let mut best = (0usize, f32::INFINITY);
                    for c in 0..num_centroids {
                        let d = l2_sq(sub.row(row), centroids.row(c));
                        if d < best.1 {
                            best = (c, d);
                        }
                    }
                    best.0 as u8
                })
                .collect();
            (centroids.data, codes)
        })
        .collect();

    let mut codebooks = Vec::with_capacity(m * num_centroids * sub_dim);
    for (cb, _) in &per_subspace {
        codebooks.extend_from_slice(cb);
    }
    let mut codes = vec![0u8; matrix.num_rows * m];
    for (s, (_, sub_codes)) in per_subspace.iter().enumerate() {
        for (row, &code) in sub_codes.iter().enumerate() {
            codes[row * m + s] = code;
        }
    }

    Ok(PqIndex {
        dim: matrix.dim,
        sub_dim,
        num_centroids,
        codebooks,
        codes,
        row_ids: matrix.row_ids.clone(),
    })
}

fn subspace_matrix(matrix: &EmbeddingMatrix, s: usize, sub_dim: usize) -> EmbeddingMatrix {
    let mut data = Vec::with_capacity(matrix.num_rows * sub_dim);
    for row in matrix.rows() {
        data.extend_from_slice(&row[s * sub_dim..(s + 1) * sub_dim]);
    }
    EmbeddingMatrix {
        num_rows: matrix.num_rows,
        dim: sub_dim,
        data,
        row_ids: Vec::new(),
    }
}

fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Mean squared reconstruction error over all rows.
pub fn reconstruction_error(index: &PqIndex, matrix: &EmbeddingMatrix) -> f64 {
    let total: f64 = (0..matrix.num_rows)
        .map(|row| f64::from(l2_sq(&index.reconstruct(row), matrix.row(row))))
        .sum();
    total / matrix.num_rows as f64
}

/// Asymmetric top-k search over the compressed rows.
pub fn pq_search(index: &PqIndex, query: &[f32], k: usize) -> Result<SearchResult> {
    let ranked = pq_search_rows(index, query, k)?;
    Ok(to_search_result(ranked, &index.row_ids))
}

pub fn pq_search_rows(index: &PqIndex, query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if query.len() != index.dim {
        return Err(Error::Argument(format!(
            "query dim {} does not match index dim {}",
            query.len(),
            index.dim
        )));
    }
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".to_string()));
    }
    let m = index.num_subspaces();

    // table[s][c] = <query subvector s, codebook centroid c>
    let mut table = vec![0.0f32; m * index.num_centroids];
    for s in 0..m {
        let q_sub = &query[s * index.sub_dim..(s + 1) * index.sub_dim];
        for c in 0..index.num_centroids {
            let entry = index.codebook_entry(s, c);
            table[s * index.num_centroids + c] =
                q_sub.iter().zip(entry).map(|(a, b)| a * b).sum();
        }
    }

    let scored: Vec<(usize, f32)> = (0..index.num_rows())
        .map(|row| {
            let mut score = 0.0f32;
            for s in 0..m {
                let code = index.codes[row * m + s] as usize;
                score += table[s * index.num_centroids + code];
            }
            (row, score)
        })
        .collect();
    Ok(select_top_k(scored, k))
}
