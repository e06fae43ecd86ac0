//! Neuron-to-neuron affinities between two models' layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{median, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median of all cross pairwise distances; a zero median becomes 1.
    Median,
    Fixed(f64),
}

fn cross_sq_distances(rows_a: &Matrix, rows_b: &Matrix) -> Result<Matrix> {
    if rows_a.cols() != rows_b.cols() {
        return Err(Error::dim("affinity feature dimension", rows_a.cols(), rows_b.cols()));
    }
    Ok(Matrix::from_fn(rows_a.rows(), rows_b.rows(), |u, v| {
        sq_dist(rows_a.row(u), rows_b.row(v))
    }))
}

pub fn resolve_bandwidth(sq: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
        Bandwidth::Fixed(h) => Err(Error::invalid(format!("kernel bandwidth must be positive, got {h}"))),
        Bandwidth::Median => {
            let d: Vec<f64> = sq.as_slice().iter().map(|v| v.sqrt()).collect();
            if d.is_empty() {
                return Ok(1.0);
            }
            let m = median(&d);
            Ok(if m > 0.0 && m.is_finite() { m } else { 1.0 })
        }
    }
}

/// `out[u][v] = exp(-‖a_u − b_v‖² / (2·h²))`.
pub fn gaussian_kernel_affinity(rows_a: &Matrix, rows_b: &Matrix, bandwidth: Bandwidth) -> Result<Matrix> {
    let sq = cross_sq_distances(rows_a, rows_b)?;
    let h = resolve_bandwidth(&sq, bandwidth)?;
    let denom = 2.0 * h * h;
    Ok(sq.map(|d| (-d / denom).exp()))
}

/// Divides by the largest entry; an all-zero (or non-positive) matrix passes through.
pub fn max_normalize(m: &Matrix) -> Matrix {
    let mx = m.max();
    if mx > 0.0 && mx.is_finite() {
        m.scale(1.0 / mx)
    } else {
        m.clone()
    }
}

/// Layer-wise merge of weight and activation affinities: each block is
/// max-normalized, then the two equally shaped blocks are added entrywise.
pub fn merge_affinity(weight_aff: &Matrix, act_aff: &Matrix) -> Result<Matrix> {
    max_normalize(weight_aff).zip_with(&max_normalize(act_aff), |w, a| w + a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_one() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let k = gaussian_kernel_affinity(&a, &a, Bandwidth::Median).unwrap();
        assert_eq!(k[(0, 0)], 1.0);
        assert_eq!(k[(1, 1)], 1.0);
    }

    #[test]
    fn known_kernel_values() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let k = gaussian_kernel_affinity(&a, &b, Bandwidth::Fixed(5.0)).unwrap();
        assert!((k[(0, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        let e1 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let e2 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let k = gaussian_kernel_affinity(&e1, &e2, Bandwidth::Fixed(1.0)).unwrap();
        assert!((k[(0, 0)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(gaussian_kernel_affinity(&a, &Matrix::zeros(1, 3), Bandwidth::Median).is_err());
        assert!(gaussian_kernel_affinity(&a, &b, Bandwidth::Fixed(0.0)).is_err());
    }

    #[test]
    fn median_zero_becomes_one() {
        let a = Matrix::zeros(2, 2);
        let sq = cross_sq_distances(&a, &a).unwrap();
        assert_eq!(resolve_bandwidth(&sq, Bandwidth::Median).unwrap(), 1.0);
    }

    #[test]
    fn merge_cases() {
        let w = Matrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(merge_affinity(&w, &z).unwrap(), w.scale(0.25));
        assert_eq!(merge_affinity(&w, &w).unwrap(), w.scale(2.0 / 4.0));
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.5, 0.0]]).unwrap();
        let m = merge_affinity(&w, &a).unwrap();
        assert_eq!(m[(0, 1)], 1.0 / 4.0 + 1.0 / 2.0);
        assert_eq!(m[(1, 0)], 2.0 / 4.0 + 0.5 / 2.0);
        assert!(merge_affinity(&w, &Matrix::zeros(3, 2)).is_err());
    }
}
