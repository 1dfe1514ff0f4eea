//! Lloyd's k-means with k-means++ seeding.
//!
//! Assignment is the hot loop and runs in parallel over rows; centroid
//! updates accumulate sequentially in row order so results are
//! independent of thread count. Empty clusters are re-seeded from the
//! farthest member of the largest cluster.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::EmbeddingMatrix;
use crate::rng::rng_for;

pub const DEFAULT_ITERS: usize = 20;

/// Row-major K x dim centroid block.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub k: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Centroids {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
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

fn nearest_centroid(row: &[f32], centroids: &Centroids) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for c in 0..centroids.k {
        let d = l2_sq(row, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Nearest centroid per row; ties go to the lowest centroid index.
pub(crate) fn assign_rows(matrix: &EmbeddingMatrix, centroids: &Centroids) -> Vec<usize> {
    (0..matrix.num_rows)
        .into_par_iter()
        .map(|i| nearest_centroid(matrix.row(i), centroids).0)
        .collect()
}

fn kmeanspp_init(matrix: &EmbeddingMatrix, k: usize, seed: u64) -> Centroids {
    let mut rng = rng_for(seed, 0x4b4d) /* "KM" */;
    let dim = matrix.dim;
    let mut data: Vec<f32> = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; matrix.num_rows];

    let first = rng.random_range(0..matrix.num_rows);
    data.extend_from_slice(matrix.row(first));
    chosen[first] = true;

    // d2[i] = squared distance to the nearest chosen centroid.
    let mut d2: Vec<f64> = (0..matrix.num_rows)
        .map(|i| f64::from(l2_sq(matrix.row(i), matrix.row(first))))
        .collect();

    while data.len() / dim < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = matrix.num_rows - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // All remaining mass is zero (duplicate rows); fall back to a
            // uniform pick among unchosen rows.
            let unchosen: Vec<usize> =
                (0..matrix.num_rows).filter(|&i| !chosen[i]).collect();
            unchosen[rng.random_range(0..unchosen.len())]
        };
        chosen[next] = true;
        data.extend_from_slice(matrix.row(next));
        let new_row = matrix.row(next);
        for i in 0..matrix.num_rows {
            let d = f64::from(l2_sq(matrix.row(i), new_row));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Centroids { k, dim, data }
}

/// Lloyd's algorithm, deterministic under `seed`.
///
/// Runs until `iters` passes or assignments stabilize, whichever comes
/// first.
pub fn kmeans(matrix: &EmbeddingMatrix, k: usize, iters: usize, seed: u64) -> Result<Centroids> {
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".to_string()));
    }
    if k > matrix.num_rows {
        return Err(Error::Argument(format!(
            "k = {k} exceeds number of rows {}",
            matrix.num_rows
        )));
    }
    let dim = matrix.dim;
    let mut centroids = kmeanspp_init(matrix, k, seed);
    let mut assignment: Vec<usize> = Vec::new();

    for _ in 0..iters {
        let mut new_assignment = assign_rows(matrix, &centroids);

        // Mean of each cluster, accumulated in f64 in row order.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in new_assignment.iter().enumerate() {
            counts[c] += 1;
            let row = matrix.row(i);
            for d in 0..dim {
                sums[c * dim + d] += f64::from(row[d]);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dim {
                centroids.data[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
            }
        }

        // Re-seed empty clusters from the farthest member of the largest
        // cluster (ties: lowest index).
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for empty in empties {
            let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
            if counts[largest] == 0 {
                break;
            }
            let mut far = (0usize, -1.0f32);
            for (i, &c) in new_assignment.iter().enumerate() {
                if c != largest {
                    continue;
                }
                let d = l2_sq(matrix.row(i), centroids.row(largest));
                if d > far.1 {
                    far = (i, d);
                }
            }
            centroids.data[empty * dim..(empty + 1) * dim].copy_from_slice(matrix.row(far.0));
            new_assignment[far.0] = empty;
            counts[largest] -= 1;
            counts[empty] += 1;
        }

        if new_assignment == assignment {
            break;
        }
        assignment = new_assignment;
    }
    Ok(centroids)
}

/// Sum of squared distances from rows to their nearest centroid.
pub fn distortion(matrix: &EmbeddingMatrix, centroids: &Centroids) -> f64 {
    (0..matrix.num_rows)
        .into_par_iter()
        .map(|i| f64::from(nearest_centroid(matrix.row(i), centroids).1))
        .sum()
}
