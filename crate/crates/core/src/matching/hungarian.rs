//! Minimum-cost perfect assignment on square cost matrices.
//!
//! The core solver is the O(n³) shortest-augmenting-path method with row and
//! column potentials. Among equal-cost optima the lexicographically smallest
//! assignment is returned, which keeps results independent of solver internals.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `cols[row]` is the column assigned to `row`.
    pub cols: Vec<usize>,
    pub cost: f64,
}

struct Solution {
    cols: Vec<usize>,
    /// Optimal dual potentials, 1-based with index 0 unused.
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Solves the assignment on a dense `n × n` cost slice (row-major).
fn solve_dense(n: usize, cost: impl Fn(usize, usize) -> f64) -> Solution {
    if n == 0 {
        return Solution {
            cols: Vec::new(),
            u: vec![0.0],
            v: vec![0.0],
        };
    }
    // 1-based arrays, index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[p[j] - 1] = j - 1;
    }
    Solution { cols, u, v }
}

fn assignment_cost(cost: &Matrix, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Minimum-cost assignment; ties resolved to the lexicographically smallest
/// column sequence (within a relative tolerance of 1e-9).
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (n, c) = cost.shape();
    if n != c {
        return Err(Error::dim("assignment square cost", n, c));
    }
    if !cost.is_finite() {
        return Err(Error::Degenerate("assignment cost must be finite".into()));
    }
    let Solution { cols: mut current, u, v } = solve_dense(n, |i, j| cost[(i, j)]);
    let best = assignment_cost(cost, &current);
    let tol = 1e-9 * best.abs().max(1.0);
    // Every optimal assignment uses only edges that are tight under the optimal
    // potentials, so slack edges never need the exact re-solve below.
    let slack_tol = 1e-7 * (1.0 + cost.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let tight = |i: usize, j: usize| cost[(i, j)] - u[i + 1] - v[j + 1] <= slack_tol;

    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let target = current[row];
        for &j in free_cols.iter().take_while(|&&j| j < target) {
            if !tight(row, j) {
                continue;
            }
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let rows = n - row - 1;
            let sub = solve_dense(rows, |i, k| cost[(row + 1 + i, rest_cols[k])]).cols;
            let sub_cost: f64 = sub.iter().enumerate().map(|(i, &k)| cost[(row + 1 + i, rest_cols[k])]).sum();
            if fixed_cost + cost[(row, j)] + sub_cost <= best + tol {
                current[row] = j;
                for (i, &k) in sub.iter().enumerate() {
                    current[row + 1 + i] = rest_cols[k];
                }
                break;
            }
        }
        let chosen = current[row];
        fixed_cost += cost[(row, chosen)];
        free_cols.retain(|&c| c != chosen);
    }
    Ok(Assignment {
        cost: assignment_cost(cost, &current),
        cols: current,
    })
}

/// Assignment maximizing total score.
pub fn hungarian_max(score: &Matrix) -> Result<Assignment> {
    let a = hungarian(&score.scale(-1.0))?;
    Ok(Assignment {
        cost: -a.cost,
        cols: a.cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &Matrix) -> (f64, Vec<usize>) {
        fn rec(cost: &Matrix, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            let n = cost.rows();
            if row == n {
                let c: f64 = cur.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
                if c < best.0 - 1e-12 {
                    *best = (c, cur.clone());
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(cost, row + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(cost, 0, &mut vec![false; cost.rows()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn identity_favoring() {
        let c = Matrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian(&c).unwrap().cols, vec![0, 1, 2, 3]);
    }

    #[test]
    fn three_by_three_known() {
        let c = Matrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.cols, vec![1, 0, 2]);
        assert_eq!(a.cost, 5.0);
        assert_eq!(brute_force(&c), (5.0, vec![1, 0, 2]));
    }

    #[test]
    fn single_and_empty() {
        let a = hungarian(&Matrix::filled(1, 1, 3.0)).unwrap();
        assert_eq!(a.cols, vec![0]);
        assert_eq!(hungarian(&Matrix::zeros(0, 0)).unwrap().cols, Vec::<usize>::new());
        assert!(hungarian(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn ties_are_lexicographic() {
        assert_eq!(hungarian(&Matrix::zeros(4, 4)).unwrap().cols, vec![0, 1, 2, 3]);
        // both [0,1] and [1,0] cost 2
        let c = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().cols, vec![0, 1]);
    }

    #[test]
    fn matches_brute_force_on_small_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            for _ in 0..20 {
                let c = Matrix::from_fn(n, n, |_, _| rng.gen_range(0..5) as f64);
                let a = hungarian(&c).unwrap();
                let (bc, bp) = brute_force(&c);
                assert_eq!(a.cost, bc);
                // brute force enumerates lexicographically and keeps the first optimum
                assert_eq!(a.cols, bp);
            }
        }
    }
}
