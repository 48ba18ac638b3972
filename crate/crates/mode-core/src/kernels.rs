//! Distance kernels and the dense f64 matrix they produce.
//!
//! Embeddings are f32; every kernel accumulates in f64 to bound error.
//! Parallel variants split work across rows only — each output element is
//! computed by exactly the same scalar operations in the same order as the
//! sequential variant, so parallel and sequential results are bit-identical
//! and independent of thread count. The `parallel` feature selects which
//! variant the public entry points dispatch to; both variants stay available
//! for the bench suite.

use crate::embed::EmbeddingMatrix;
use crate::error::ModeError;
use crate::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense row-major f64 matrix for distances, similarities, and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Squared Euclidean distance between two equal-length f32 slices,
/// accumulated in f64.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

/// Dot product of two equal-length f32 slices, accumulated in f64.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

fn check_dims(a: &EmbeddingMatrix, b: &EmbeddingMatrix, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(ModeError::DimensionMismatch {
            context: context.into(),
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

fn pairwise_row(point: &[f32], centers: &EmbeddingMatrix, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = sq_dist(point, centers.row(j));
    }
}

/// Sequential pairwise squared distances: `out[i][j] = ||a_i - b_j||^2`.
pub fn pairwise_sq_dist_seq(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Mat64> {
    check_dims(a, b, "pairwise_sq_dist")?;
    let mut out = Mat64::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        pairwise_row(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// Parallel pairwise squared distances; bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn pairwise_sq_dist_par(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Mat64> {
    check_dims(a, b, "pairwise_sq_dist")?;
    let cols = b.rows();
    let mut out = Mat64::zeros(a.rows(), cols);
    out.data_mut()
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, row)| pairwise_row(a.row(i), b, row));
    Ok(out)
}

/// Pairwise squared distances between every row of `a` and every row of `b`.
pub fn pairwise_sq_dist(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Mat64> {
    #[cfg(feature = "parallel")]
    {
        pairwise_sq_dist_par(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairwise_sq_dist_seq(a, b)
    }
}

fn dot_row(a_row: &[f64], b: &Mat64, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (&x, &y) in a_row.iter().zip(b.row(j)) {
            acc += x * y;
        }
        *slot = acc;
    }
}

fn check_mat_dims(a: &Mat64, b: &Mat64, context: &str) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(ModeError::DimensionMismatch {
            context: context.into(),
            left: a.cols(),
            right: b.cols(),
        });
    }
    Ok(())
}

/// Sequential row dot products: `out[i][j] = a_i . b_j`.
pub fn dot_matrix_seq(a: &Mat64, b: &Mat64) -> Result<Mat64> {
    check_mat_dims(a, b, "dot_matrix")?;
    let mut out = Mat64::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        dot_row(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// Parallel row dot products; bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn dot_matrix_par(a: &Mat64, b: &Mat64) -> Result<Mat64> {
    check_mat_dims(a, b, "dot_matrix")?;
    let cols = b.rows();
    let mut out = Mat64::zeros(a.rows(), cols);
    out.data_mut()
        .par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, row)| dot_row(a.row(i), b, row));
    Ok(out)
}

/// Dot products between every row of `a` and every row of `b` (score
/// matrices between embedded queries and an embedded corpus).
pub fn dot_matrix(a: &Mat64, b: &Mat64) -> Result<Mat64> {
    #[cfg(feature = "parallel")]
    {
        dot_matrix_par(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        dot_matrix_seq(a, b)
    }
}

fn nearest_one(point: &[f32], centers: &EmbeddingMatrix) -> (u32, f64) {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for j in 0..centers.rows() {
        let d = sq_dist(point, centers.row(j));
        // Strict `<` keeps the lowest center index on exact ties.
        if d < best_d {
            best = j as u32;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Sequential nearest-center assignment.
pub fn nearest_center_seq(
    points: &EmbeddingMatrix,
    centers: &EmbeddingMatrix,
) -> Result<(Vec<u32>, Vec<f64>)> {
    check_dims(points, centers, "nearest_center")?;
    if centers.rows() == 0 {
        return Err(ModeError::Config("nearest_center needs at least one center".into()));
    }
    let mut ids = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let (id, d) = nearest_one(points.row(i), centers);
        ids.push(id);
        dists.push(d);
    }
    Ok((ids, dists))
}

/// Parallel nearest-center assignment; bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn nearest_center_par(
    points: &EmbeddingMatrix,
    centers: &EmbeddingMatrix,
) -> Result<(Vec<u32>, Vec<f64>)> {
    check_dims(points, centers, "nearest_center")?;
    if centers.rows() == 0 {
        return Err(ModeError::Config("nearest_center needs at least one center".into()));
    }
    let pairs: Vec<(u32, f64)> = (0..points.rows())
        .into_par_iter()
        .map(|i| nearest_one(points.row(i), centers))
        .collect();
    Ok(pairs.into_iter().unzip())
}

/// For each point, the index of its nearest center (lowest index wins ties)
/// and the squared distance to it.
pub fn nearest_center(
    points: &EmbeddingMatrix,
    centers: &EmbeddingMatrix,
) -> Result<(Vec<u32>, Vec<f64>)> {
    #[cfg(feature = "parallel")]
    {
        nearest_center_par(points, centers)
    }
    #[cfg(not(feature = "parallel"))]
    {
        nearest_center_seq(points, centers)
    }
}

/// Numerically stable softmax. Finite inputs give strictly positive weights
/// summing to 1 (up to rounding).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::gauss;

    fn mat(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn orthogonal_unit_rows_are_distance_two() {
        let a = mat(&[vec![1.0, 0.0]]);
        let b = mat(&[vec![0.0, 1.0]]);
        let d = pairwise_sq_dist(&a, &b).unwrap();
        assert_eq!(d.at(0, 0), 2.0);
    }

    #[test]
    fn pairwise_matches_scalar_loop_oracle() {
        let mut rng = crate::stream::derive_rng(3, "kernel-test", 0);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let d = pairwise_sq_dist(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut want = 0.0f64;
                for k in 0..3 {
                    let diff = a.row(i)[k] as f64 - b.row(j)[k] as f64;
                    want += diff * diff;
                }
                assert_eq!(d.at(i, j), want);
            }
        }
    }

    #[test]
    fn dot_matrix_matches_scalar_loop_oracle() {
        let mut rng = crate::stream::derive_rng(8, "kernel-test", 3);
        let a = Mat64::from_vec(4, 3, (0..12).map(|_| gauss(&mut rng)).collect());
        let b = Mat64::from_vec(5, 3, (0..15).map(|_| gauss(&mut rng)).collect());
        let d = dot_matrix(&a, &b).unwrap();
        assert_eq!(d.rows(), 4);
        assert_eq!(d.cols(), 5);
        for i in 0..4 {
            for j in 0..5 {
                let mut want = 0.0f64;
                for k in 0..3 {
                    want += a.at(i, k) * b.at(j, k);
                }
                assert_eq!(d.at(i, j), want);
            }
        }
        let bad = Mat64::zeros(2, 7);
        assert!(dot_matrix(&a, &bad).is_err());
        #[cfg(feature = "parallel")]
        {
            let seq = dot_matrix_seq(&a, &b).unwrap();
            assert_eq!(seq.data(), d.data());
        }
    }

    #[test]
    fn self_distance_matrix_is_symmetric_with_zero_diagonal() {
        let mut rng = crate::stream::derive_rng(4, "kernel-test", 1);
        let a = random_matrix(&mut rng, 6, 4);
        let d = pairwise_sq_dist(&a, &a).unwrap();
        for i in 0..6 {
            assert_eq!(d.at(i, i), 0.0);
            for j in 0..6 {
                assert_eq!(d.at(i, j), d.at(j, i), "asymmetry at ({i},{j})");
            }
        }
    }

    #[test]
    fn nearest_center_breaks_ties_toward_lowest_index() {
        // Point at the origin, centers 2 and 5 both at distance 1 exactly.
        let points = mat(&[vec![0.0, 0.0]]);
        let centers = mat(&[
            vec![3.0, 0.0],
            vec![0.0, 2.0],
            vec![1.0, 0.0],
            vec![-2.0, 0.0],
            vec![0.0, -4.0],
            vec![0.0, 1.0],
        ]);
        let (ids, dists) = nearest_center(&points, &centers).unwrap();
        assert_eq!(ids, vec![2]);
        assert_eq!(dists, vec![1.0]);
    }

    #[test]
    fn seq_and_par_paths_are_bit_identical() {
        #[cfg(feature = "parallel")]
        {
            let mut rng = crate::stream::derive_rng(5, "kernel-test", 2);
            let a = random_matrix(&mut rng, 40, 8);
            let b = random_matrix(&mut rng, 17, 8);
            assert_eq!(
                pairwise_sq_dist_seq(&a, &b).unwrap(),
                pairwise_sq_dist_par(&a, &b).unwrap()
            );
            assert_eq!(nearest_center_seq(&a, &b).unwrap(), nearest_center_par(&a, &b).unwrap());
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let scores = vec![1.0, -2.0, 0.5, 7.0];
        let w = softmax(&scores);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.0).collect();
        let w2 = softmax(&shifted);
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn random_matrix(rng: &mut impl rand::Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EmbeddingMatrix::from_vec(rows, dim, data).unwrap()
    }
}
