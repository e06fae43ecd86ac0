//! Projection onto doubly stochastic matrices by alternating row/column scaling.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutcome {
    pub matrix: Matrix,
    /// Largest deviation of any row or column sum from 1.
    pub residual: f64,
    pub iterations: usize,
}

pub const SINKHORN_TOL: f64 = 1e-6;

fn marginal_residual(m: &Matrix) -> f64 {
    let (r, c) = m.shape();
    let mut worst: f64 = 0.0;
    for i in 0..r {
        worst = worst.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
    }
    for j in 0..c {
        worst = worst.max(((0..r).map(|i| m[(i, j)]).sum::<f64>() - 1.0).abs());
    }
    worst
}

/// Scales a non-negative square matrix toward unit row and column sums.
///
/// Stops when the residual drops below `tol` or after `iters` sweeps; the final
/// residual is reported either way.
pub fn sinkhorn_project(matrix: &Matrix, iters: usize, tol: f64) -> Result<SinkhornOutcome> {
    let (n, c) = matrix.shape();
    if n != c {
        return Err(Error::dim("sinkhorn square input", n, c));
    }
    if matrix.as_slice().iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Degenerate("sinkhorn input must be finite and non-negative".into()));
    }
    let mut m = matrix.clone();
    for i in 0..n {
        if m.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("row {i} is all zero")));
        }
    }
    for j in 0..n {
        if (0..n).all(|i| m[(i, j)] == 0.0) {
            return Err(Error::Degenerate(format!("column {j} is all zero")));
        }
    }
    let mut residual = marginal_residual(&m);
    let mut it = 0;
    while it < iters && residual >= tol {
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            for v in m.row_mut(i) {
                *v /= s;
            }
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| m[(i, j)]).sum();
            for i in 0..n {
                m[(i, j)] /= s;
            }
        }
        it += 1;
        residual = marginal_residual(&m);
    }
    Ok(SinkhornOutcome {
        matrix: m,
        residual,
        iterations: it,
    })
}

/// `exp((x − max) / tau)` entrywise.
pub fn lift_scores(scores: &Matrix, tau: f64) -> Matrix {
    let mx = scores.max();
    scores.map(|x| ((x - mx) / tau).exp())
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Sinkhorn on `exp(scores / tau)` carried out in the log domain, so small
/// temperatures cannot underflow whole rows or columns.
pub fn sinkhorn_log(scores: &Matrix, tau: f64, iters: usize, tol: f64) -> Result<SinkhornOutcome> {
    let (n, c) = scores.shape();
    if n != c {
        return Err(Error::dim("sinkhorn square input", n, c));
    }
    if !(tau > 0.0) || !scores.is_finite() {
        return Err(Error::Degenerate("sinkhorn scores must be finite with tau > 0".into()));
    }
    let log_k = scores.scale(1.0 / tau);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let build = |u: &[f64], v: &[f64]| Matrix::from_fn(n, n, |i, j| (log_k[(i, j)] + u[i] + v[j]).exp());
    let mut m = build(&u, &v);
    let mut residual = marginal_residual(&m);
    let mut it = 0;
    while it < iters && residual >= tol {
        for i in 0..n {
            u[i] = -logsumexp((0..n).map(|j| log_k[(i, j)] + v[j]));
        }
        for j in 0..n {
            v[j] = -logsumexp((0..n).map(|i| log_k[(i, j)] + u[i]));
        }
        it += 1;
        m = build(&u, &v);
        residual = marginal_residual(&m);
    }
    Ok(SinkhornOutcome {
        matrix: m,
        residual,
        iterations: it,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_is_fixed_point() {
        let p = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let out = sinkhorn_project(&p, 50, SINKHORN_TOL).unwrap();
        assert_eq!(out.matrix, p);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn marginals_within_tolerance() {
        let m = Matrix::from_fn(5, 5, |i, j| 1.0 + ((i * 7 + j * 3) % 5) as f64);
        let out = sinkhorn_project(&m, 1000, SINKHORN_TOL).unwrap();
        assert!(out.residual < SINKHORN_TOL);
        for i in 0..5 {
            let s: f64 = out.matrix.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn low_temperature_picks_trace_maximizer() {
        // brute force: identity trace 4 beats the swap's 2
        let s = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let out = sinkhorn_project(&lift_scores(&s, 0.05), 500, SINKHORN_TOL).unwrap();
        assert!(out.matrix[(0, 0)] > 0.999 && out.matrix[(1, 1)] > 0.999);
        let plain = sinkhorn_project(&lift_scores(&s, 0.05), 10_000, 1e-14).unwrap();
        let log = sinkhorn_log(&s, 0.05, 10_000, 1e-14).unwrap();
        assert!(log.matrix.max_abs_diff(&plain.matrix) < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(sinkhorn_project(&m, 10, SINKHORN_TOL), Err(Error::Degenerate(_))));
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(sinkhorn_project(&m, 10, SINKHORN_TOL), Err(Error::Degenerate(_))));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let m = Matrix::from_fn(4, 4, |i, j| ((i + 1) * (j + 2)) as f64 + if i == j { 10.0 } else { 0.0 });
        let out = sinkhorn_project(&m, 1, 0.0).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.residual > 0.0);
    }
}
