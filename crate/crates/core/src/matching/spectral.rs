//! Power iteration for principal eigenvectors of non-negative affinity operators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerOutcome {
    /// Unit-norm, non-negative principal vector estimate.
    pub vector: Vec<f64>,
    /// `‖v_{k+1} − v_k‖` of the last step.
    pub residual: f64,
    pub iterations: usize,
}

/// Power iteration on an implicit operator `apply(v, out)`, starting from the
/// uniform unit vector. Negative components are clamped to zero each step.
pub fn power_iteration(
    dim: usize,
    mut apply: impl FnMut(&[f64], &mut [f64]),
    iters: usize,
    tol: f64,
) -> Result<PowerOutcome> {
    if dim == 0 {
        return Err(Error::invalid("power iteration needs a positive dimension"));
    }
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut next = vec![0.0; dim];
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < iters {
        next.iter_mut().for_each(|x| *x = 0.0);
        apply(&v, &mut next);
        for x in next.iter_mut() {
            if !x.is_finite() {
                return Err(Error::Degenerate("affinity operator produced non-finite values".into()));
            }
            *x = x.max(0.0);
        }
        let nn = norm(&next);
        if nn == 0.0 {
            return Err(Error::Degenerate("affinity operator annihilated the iterate".into()));
        }
        next.iter_mut().for_each(|x| *x /= nn);
        residual = v.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut next);
        it += 1;
        if residual < tol {
            break;
        }
    }
    Ok(PowerOutcome {
        vector: v,
        residual,
        iterations: it,
    })
}

pub fn power_iteration_dense(op: &Matrix, iters: usize, tol: f64) -> Result<PowerOutcome> {
    let (n, c) = op.shape();
    if n != c {
        return Err(Error::dim("power iteration operator", n, c));
    }
    power_iteration(
        n,
        |v, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = crate::linalg::dot(op.row(i), v);
            }
        },
        iters,
        tol,
    )
}

/// Principal vector of the pairwise-compatibility operator of one layer,
/// reshaped into an `n × n` soft assignment.
///
/// For candidate pairs `(a,b)` and `(f,k)` the operator entry is
/// `K[a,b]·K[f,k]` when `a≠f` and `b≠k` (the two pairs can coexist in a
/// one-to-one matching), `K[a,b]` on the diagonal, and zero otherwise. The
/// operator is applied implicitly in O(n²).
pub fn layer_principal_assignment(merged: &Matrix, iters: usize, tol: f64) -> Result<(Matrix, PowerOutcome)> {
    let n = merged.rows();
    if merged.cols() != n {
        return Err(Error::dim("layer affinity", n, merged.cols()));
    }
    let k = merged.as_slice();
    let outcome = power_iteration(
        n * n,
        |v, out| {
            let y: Vec<f64> = k.iter().zip(v).map(|(a, b)| a * b).collect();
            let total: f64 = y.iter().sum();
            let row: Vec<f64> = (0..n).map(|a| y[a * n..(a + 1) * n].iter().sum()).collect();
            let col: Vec<f64> = (0..n).map(|b| (0..n).map(|a| y[a * n + b]).sum()).collect();
            for a in 0..n {
                for b in 0..n {
                    let idx = a * n + b;
                    let compatible = total - row[a] - col[b] + y[idx];
                    out[idx] = k[idx] * (v[idx] + compatible);
                }
            }
        },
        iters,
        tol,
    )?;
    let soft = Matrix::from_vec(n, n, outcome.vector.clone())?;
    Ok((soft, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_operator_keeps_uniform() {
        let out = power_iteration_dense(&Matrix::identity(9), 50, 1e-12).unwrap();
        for &x in &out.vector {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(out.residual < 1e-12);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn rank_one_recovers_generator() {
        let u = [0.5, 1.0, 2.0, 3.5];
        let op = Matrix::from_fn(4, 4, |i, j| u[i] * u[j]);
        let out = power_iteration_dense(&op, 10, 1e-12).unwrap();
        let nu = norm(&u);
        for (x, ui) in out.vector.iter().zip(u) {
            assert!((x - ui / nu).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_operator_matches_dense() {
        let n = 3;
        let k = Matrix::from_fn(n, n, |a, b| 0.2 + ((a * 5 + b * 3) % 7) as f64 / 7.0);
        let dense = Matrix::from_fn(n * n, n * n, |p, q| {
            let (a, b, f, kk) = (p / n, p % n, q / n, q % n);
            if p == q {
                k[(a, b)]
            } else if a != f && b != kk {
                k[(a, b)] * k[(f, kk)]
            } else {
                0.0
            }
        });
        let (_, implicit) = layer_principal_assignment(&k, 200, 1e-14).unwrap();
        let explicit = power_iteration_dense(&dense, 200, 1e-14).unwrap();
        for (a, b) in implicit.vector.iter().zip(&explicit.vector) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_affinity_gives_uniform_assignment() {
        let (soft, out) = layer_principal_assignment(&Matrix::filled(3, 3, 1.0), 100, 1e-12).unwrap();
        let first = soft[(0, 0)];
        assert!(soft.as_slice().iter().all(|&x| (x - first).abs() < 1e-12));
        assert!(out.residual < 1e-12);
    }
}
