//! Layer-wise neuron matching between a local model graph and a remote
//! perturbed graph.
//!
//! The full edge-to-edge affinity tensor over all neurons is never built.
//! Instead each hidden layer gets an `n × n` score matrix: the merged
//! (weight + activation) affinity, where the remote incoming weights are
//! re-expressed through the current soft assignment of the previous layer, plus
//! an outgoing-weight term coupled through the next layer's assignment. Soft
//! assignments are refined by annealed Sinkhorn projections and finally
//! rounded with the Hungarian method.

pub mod affinity;
pub mod hungarian;
pub mod sinkhorn;
pub mod spectral;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::ldp::PerturbedGraph;
use crate::linalg::Matrix;

pub use affinity::{gaussian_kernel_affinity, max_normalize, merge_affinity, Bandwidth};
pub use hungarian::{hungarian, hungarian_max, Assignment};
pub use sinkhorn::{lift_scores, sinkhorn_log, sinkhorn_project, SinkhornOutcome, SINKHORN_TOL};
pub use spectral::{layer_principal_assignment, power_iteration, power_iteration_dense, PowerOutcome};

/// One bijection per hidden layer. `perms[h-1][a] = b` pairs neuron `a` of the
/// reference model with neuron `b` of the other model in hidden layer `h`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    pub layer_sizes: Vec<usize>,
    pub perms: Vec<Vec<usize>>,
}

impl PermutationSet {
    pub fn identity(layer_sizes: &[usize]) -> Self {
        let perms = layer_sizes[1..layer_sizes.len() - 1]
            .iter()
            .map(|&n| (0..n).collect())
            .collect();
        Self {
            layer_sizes: layer_sizes.to_vec(),
            perms,
        }
    }

    pub fn new(layer_sizes: &[usize], perms: Vec<Vec<usize>>) -> Result<Self> {
        let set = Self {
            layer_sizes: layer_sizes.to_vec(),
            perms,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Architecture("no hidden layers to permute".into()));
        }
        let hidden = self.layer_sizes.len() - 2;
        if self.perms.len() != hidden {
            return Err(Error::dim("permutation layers", hidden, self.perms.len()));
        }
        for (i, p) in self.perms.iter().enumerate() {
            let n = self.layer_sizes[i + 1];
            if p.len() != n {
                return Err(Error::dim(format!("permutation of layer {}", i + 1), n, p.len()));
            }
            let mut seen = vec![false; n];
            for &v in p {
                if v >= n || seen[v] {
                    return Err(Error::invalid(format!("layer {} permutation is not a bijection", i + 1)));
                }
                seen[v] = true;
            }
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (a, &b) in p.iter().enumerate() {
                    inv[b] = a;
                }
                inv
            })
            .collect();
        Self {
            layer_sizes: self.layer_sizes.clone(),
            perms,
        }
    }

    /// Permutation equivalent to applying `self` and then `next`:
    /// `out[a] = self[next[a]]`.
    pub fn then(&self, next: &PermutationSet) -> Self {
        let perms = self
            .perms
            .iter()
            .zip(&next.perms)
            .map(|(p, q)| q.iter().map(|&a| p[a]).collect())
            .collect();
        Self {
            layer_sizes: self.layer_sizes.clone(),
            perms,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perms.iter().all(|p| p.iter().enumerate().all(|(a, &b)| a == b))
    }

    /// 0/1 matrix of hidden layer `h` (1-based), `M[a][perm[a]] = 1`.
    pub fn matrix(&self, h: usize) -> Matrix {
        let p = &self.perms[h - 1];
        let mut m = Matrix::zeros(p.len(), p.len());
        for (a, &b) in p.iter().enumerate() {
            m[(a, b)] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftInit {
    Uniform,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub bandwidth: Bandwidth,
    pub sinkhorn_iters: usize,
    pub tau_start: f64,
    pub tau_decay: f64,
    pub tau_floor: f64,
    pub power_iters: usize,
    pub outer_rounds: usize,
    pub convergence_tol: f64,
    pub init: SoftInit,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            sinkhorn_iters: 50,
            tau_start: 1.0,
            tau_decay: 0.7,
            tau_floor: 0.05,
            power_iters: 100,
            outer_rounds: 10,
            convergence_tol: 1e-6,
            init: SoftInit::Uniform,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_start", self.tau_start),
            ("tau_decay", self.tau_decay),
            ("tau_floor", self.tau_floor),
            ("convergence_tol", self.convergence_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.sinkhorn_iters == 0 || self.outer_rounds == 0 || self.power_iters == 0 {
            return Err(Error::invalid("solver iteration counts must be positive"));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(Error::invalid("kernel bandwidth must be positive"));
            }
        }
        Ok(())
    }
}

/// One row of the per-round diagnostic dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub round: usize,
    pub layer: usize,
    pub tau: f64,
    /// `⟨merged, soft assignment⟩` for this layer.
    pub objective: f64,
    pub sinkhorn_residual: f64,
    /// Mean row entropy of the soft assignment (nats).
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub perms: PermutationSet,
    pub diagnostics: Vec<LayerDiagnostics>,
    /// Layer-decomposed objective of the identity assignment.
    pub identity_objective: f64,
    /// Layer-decomposed objective of the returned assignment.
    pub objective: f64,
    /// Set when rounding ended below the identity objective and the identity
    /// was returned instead.
    pub fell_back_to_identity: bool,
}

impl MatchOutcome {
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("round,layer,tau,objective,sinkhorn_residual,entropy\n");
        for d in &self.diagnostics {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                d.round, d.layer, d.tau, d.objective, d.sinkhorn_residual, d.entropy
            ));
        }
        out
    }
}

/// Weight and activation material of both sides, indexed by layer.
struct Problem<'a> {
    sizes: &'a [usize],
    /// local incoming weights, `local_w[p-1]` for layer p
    local_w: &'a [Matrix],
    /// remote incoming weight estimates
    remote_w: Vec<Matrix>,
    /// activation affinities per hidden layer (fixed across rounds)
    act_aff: Vec<Matrix>,
    bandwidth: Bandwidth,
}

impl Problem<'_> {
    fn hidden(&self) -> usize {
        self.sizes.len() - 2
    }

    /// Remote incoming rows of layer `h` with their columns moved into the local
    /// order of layer `h-1`: `out[v][a] = Σ_b W[v][b]·S[a][b]`.
    fn aligned_incoming(&self, h: usize, prev: &Matrix) -> Matrix {
        self.remote_w[h - 1].matmul_t(prev).expect("shapes agree")
    }

    /// Merged affinity of hidden layer `h` given the assignment of layer `h-1`.
    fn merged(&self, h: usize, prev: &Matrix) -> Result<Matrix> {
        let remote = self.aligned_incoming(h, prev);
        let w = gaussian_kernel_affinity(&self.local_w[h - 1], &remote, self.bandwidth)?;
        merge_affinity(&w, &self.act_aff[h - 1])
    }

    /// Outgoing-weight affinity of hidden layer `h` given the assignment of
    /// layer `h+1`.
    fn outgoing(&self, h: usize, next: &Matrix) -> Result<Matrix> {
        let remote = next.matmul(&self.remote_w[h]).expect("shapes agree");
        let k = gaussian_kernel_affinity(&self.local_w[h].transpose(), &remote.transpose(), self.bandwidth)?;
        Ok(max_normalize(&k))
    }

    fn scores(&self, h: usize, prev: &Matrix, next: &Matrix) -> Result<(Matrix, Matrix)> {
        let merged = self.merged(h, prev)?;
        let scores = merged.zip_with(&self.outgoing(h, next)?, |a, b| a + b)?;
        if !scores.is_finite() {
            return Err(Error::Degenerate(format!("non-finite affinity in layer {h}")));
        }
        Ok((merged, scores))
    }

    /// `assignment[h]` for `h` in `0..=hidden+1`, with fixed identities at the ends.
    fn boundary(&self, soft: &[Matrix]) -> Vec<Matrix> {
        let mut all = Vec::with_capacity(self.sizes.len());
        all.push(Matrix::identity(self.sizes[0]));
        all.extend(soft.iter().cloned());
        all.push(Matrix::identity(*self.sizes.last().expect("non-empty")));
        all
    }

    /// `Σ_h ⟨merged_h(P_{h-1}), P_h⟩` for discrete permutations.
    fn objective(&self, perms: &PermutationSet) -> Result<f64> {
        let mats: Vec<Matrix> = (1..=self.hidden()).map(|h| perms.matrix(h)).collect();
        let all = self.boundary(&mats);
        let mut total = 0.0;
        for h in 1..=self.hidden() {
            total += self.merged(h, &all[h - 1])?.inner(&all[h]);
        }
        Ok(total)
    }
}

fn row_entropy(m: &Matrix) -> f64 {
    let n = m.rows().max(1) as f64;
    let mut total = 0.0;
    for i in 0..m.rows() {
        for &p in m.row(i) {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / n
}

/// Layer-decomposed matching objective of `perms` (exposed for oracles and
/// diagnostics).
pub fn matching_objective(
    local: &ModelGraph,
    remote: &PerturbedGraph,
    perms: &PermutationSet,
    config: &SolverConfig,
) -> Result<f64> {
    build_problem(local, remote, config)?.objective(perms)
}

fn build_problem<'a>(local: &'a ModelGraph, remote: &PerturbedGraph, config: &SolverConfig) -> Result<Problem<'a>> {
    config.validate()?;
    if local.layer_sizes != remote.layer_sizes {
        return Err(Error::Architecture(format!(
            "local layers {:?} vs remote layers {:?}",
            local.layer_sizes, remote.layer_sizes
        )));
    }
    remote.validate()?;
    if local.probe_count() != remote.node_features[0].cols() {
        return Err(Error::dim(
            "probe count",
            local.probe_count(),
            remote.node_features[0].cols(),
        ));
    }
    let act_aff = local
        .node_features
        .iter()
        .zip(&remote.node_features)
        .map(|(a, b)| gaussian_kernel_affinity(a, b, config.bandwidth))
        .collect::<Result<Vec<_>>>()?;
    Ok(Problem {
        sizes: &local.layer_sizes,
        local_w: &local.weight_features,
        remote_w: remote.weight_estimates(),
        act_aff,
        bandwidth: config.bandwidth,
    })
}

/// Aligns the remote model's hidden neurons to the local model's.
///
/// Returns `perms` with `perms[h-1][a]` = remote neuron matched to local neuron
/// `a`; applying it to the remote model moves it into the local neuron order.
pub fn match_models(local: &ModelGraph, remote: &PerturbedGraph, config: &SolverConfig) -> Result<MatchOutcome> {
    let problem = build_problem(local, remote, config)?;
    let hidden = problem.hidden();
    let sizes = &local.layer_sizes;

    let mut soft: Vec<Matrix> = match config.init {
        SoftInit::Uniform => (1..=hidden)
            .map(|h| Matrix::filled(sizes[h], sizes[h], 1.0 / sizes[h] as f64))
            .collect(),
        SoftInit::Spectral => {
            let uniform: Vec<Matrix> = (1..=hidden)
                .map(|h| Matrix::filled(sizes[h], sizes[h], 1.0 / sizes[h] as f64))
                .collect();
            let all = problem.boundary(&uniform);
            (1..=hidden)
                .map(|h| {
                    let merged = problem.merged(h, &all[h - 1])?;
                    let (principal, _) =
                        layer_principal_assignment(&merged, config.power_iters, config.convergence_tol)?;
                    let positive = principal.map(|x| x.max(1e-12));
                    Ok(sinkhorn_project(&positive, config.sinkhorn_iters, SINKHORN_TOL)?.matrix)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let mut diagnostics = Vec::new();
    let mut tau = config.tau_start;
    for round in 0..config.outer_rounds {
        let mut max_change: f64 = 0.0;
        for h in 1..=hidden {
            let prev = if h == 1 { Matrix::identity(sizes[0]) } else { soft[h - 2].clone() };
            let next = if h == hidden { Matrix::identity(sizes[h + 1]) } else { soft[h].clone() };
            let (merged, scores) = problem.scores(h, &prev, &next)?;
            let projected = sinkhorn_log(&scores, tau, config.sinkhorn_iters, SINKHORN_TOL)?;
            max_change = max_change.max(projected.matrix.max_abs_diff(&soft[h - 1]));
            diagnostics.push(LayerDiagnostics {
                round,
                layer: h,
                tau,
                objective: merged.inner(&projected.matrix),
                sinkhorn_residual: projected.residual,
                entropy: row_entropy(&projected.matrix),
            });
            soft[h - 1] = projected.matrix;
        }
        tau = (tau * config.tau_decay).max(config.tau_floor);
        if max_change < config.convergence_tol {
            break;
        }
    }

    // round layer by layer; earlier layers are already discrete
    let mut discrete: Vec<Matrix> = soft.clone();
    let mut perms = Vec::with_capacity(hidden);
    for h in 1..=hidden {
        let prev = if h == 1 { Matrix::identity(sizes[0]) } else { discrete[h - 2].clone() };
        let next = if h == hidden { Matrix::identity(sizes[h + 1]) } else { soft[h].clone() };
        let (_, scores) = problem.scores(h, &prev, &next)?;
        let a = hungarian_max(&scores)?;
        let mut m = Matrix::zeros(sizes[h], sizes[h]);
        for (i, &j) in a.cols.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        discrete[h - 1] = m;
        perms.push(a.cols);
    }
    let perms = PermutationSet::new(sizes, perms)?;
    let identity = PermutationSet::identity(sizes);
    let identity_objective = problem.objective(&identity)?;
    let objective = problem.objective(&perms)?;
    let (perms, objective, fell_back_to_identity) = if objective < identity_objective {
        (identity, identity_objective, true)
    } else {
        (perms, objective, false)
    };
    Ok(MatchOutcome {
        perms,
        diagnostics,
        identity_objective,
        objective,
        fell_back_to_identity,
    })
}
