//! Shared fixtures for the solver benchmarks.

use fusekit::fusion::apply_permutations;
use fusekit::graph::{build_graph, ModelGraph};
use fusekit::ldp::{perturb_graph, NoiseSpec, PerturbConfig, PerturbedGraph};
use fusekit::{Activation, Matrix, MlpModel, MlpSpec, PermutationSet};

/// Seeded `n × n` matrix with entries uniform in a small symmetric range.
pub fn random_square(n: usize, seed: u64) -> Matrix {
    let spec = MlpSpec::new(vec![n, n, 1], Activation::Relu, false).expect("valid spec");
    MlpModel::init_uniform(spec, seed).expect("init").weights.remove(0)
}

/// Graph of a random `d-w-w-c` model and the test-mode share of a clone whose
/// hidden neurons are rotated by one position.
pub fn clone_pair(d: usize, width: usize, classes: usize, probes: usize, seed: u64) -> (ModelGraph, PerturbedGraph) {
    let spec = MlpSpec::new(vec![d, width, width, classes], Activation::Relu, true).expect("valid spec");
    let a = MlpModel::init_uniform(spec, seed).expect("init");
    let rot: Vec<usize> = (0..width).map(|i| (i + 1) % width).collect();
    let pi = PermutationSet::new(&a.spec.layer_sizes, vec![rot.clone(), rot]).expect("permutation");
    let b = apply_permutations(&a, &pi).expect("same architecture");
    let probe = Matrix::from_fn(probes, d, |i, j| ((i * 31 + j * 17) % 97) as f64 / 97.0);
    let graph_a = build_graph(&a, &probe).expect("graph");
    let share_b = perturb_graph(
        &build_graph(&b, &probe).expect("graph"),
        &PerturbConfig::disabled(),
        &NoiseSpec::new(seed),
    )
    .expect("share");
    (graph_a, share_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fusekit::matching::match_models;
    use fusekit::SolverConfig;

    #[test]
    fn fixtures_are_consistent() {
        assert_eq!(random_square(5, 1).shape(), (5, 5));
        assert_eq!(random_square(5, 1), random_square(5, 1));
        let (g, s) = clone_pair(6, 5, 3, 12, 2);
        let out = match_models(&g, &s, &SolverConfig::default()).unwrap();
        let rot: Vec<usize> = (0..5).map(|i| (i + 1) % 5).collect();
        assert_eq!(out.perms.inverse().perms, vec![rot.clone(), rot]);
    }
}
