mod common;

use common::{brute_force_best, permuted_clone, random_perms, rng};
use fusekit::fusion::{apply_permutations, fuse_weights, FusionRule};
use fusekit::graph::build_graph;
use fusekit::ldp::{perturb_graph, NoiseSpec, PerturbConfig};
use fusekit::matching::{match_models, matching_objective};
use fusekit::{Activation, Matrix, MlpModel, MlpSpec, SolverConfig};
use rand::Rng;

fn random_probe(n: usize, d: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(n, d, |_, _| r.gen::<f64>())
}

fn model(sizes: Vec<usize>, seed: u64) -> MlpModel {
    MlpModel::init_uniform(MlpSpec::new(sizes, Activation::Relu, true).unwrap(), seed).unwrap()
}

#[test]
fn recovers_planted_permutation_and_brute_force_optimum() {
    let cfg = SolverConfig::default();
    let mut r = rng(7);
    for trial in 0..12u64 {
        let w1 = 4 + (trial as usize % 2);
        let w2 = 5 - (trial as usize % 2);
        let a = model(vec![6, w1, w2, 3], trial);
        let (b, pi) = permuted_clone(&a, &mut r);
        let probe = random_probe(24, 6, trial);
        let ga = build_graph(&a, &probe).unwrap();
        let share_b = perturb_graph(&build_graph(&b, &probe).unwrap(), &PerturbConfig::disabled(), &NoiseSpec::new(0)).unwrap();
        let out = match_models(&ga, &share_b, &cfg).unwrap();
        assert_eq!(out.perms, pi, "trial {trial}");
        let best = brute_force_best(&ga, &share_b, &cfg);
        assert!((out.objective - best).abs() <= 1e-9 * best.abs().max(1.0), "trial {trial}");
        assert!(out.objective >= out.identity_objective);
    }
}

#[test]
fn wider_layers_recover_exactly() {
    let cfg = SolverConfig::default();
    let mut r = rng(11);
    for trial in 0..6u64 {
        let a = model(vec![10, 8, 7, 4], 100 + trial);
        let (b, pi) = permuted_clone(&a, &mut r);
        let probe = random_probe(40, 10, trial);
        let ga = build_graph(&a, &probe).unwrap();
        let share_b = perturb_graph(&build_graph(&b, &probe).unwrap(), &PerturbConfig::disabled(), &NoiseSpec::new(0)).unwrap();
        assert_eq!(match_models(&ga, &share_b, &cfg).unwrap().perms, pi);
    }
}

#[test]
fn graph_features_are_permutation_equivariant() {
    let a = model(vec![5, 6, 4, 3], 3);
    let mut r = rng(3);
    let pi = random_perms(&a.spec.layer_sizes, &mut r);
    let b = apply_permutations(&a, &pi).unwrap();
    let probe = random_probe(9, 5, 3);
    let (ga, gb) = (build_graph(&a, &probe).unwrap(), build_graph(&b, &probe).unwrap());
    for (h, p) in pi.perms.iter().enumerate() {
        assert!(gb.node_features[h].max_abs_diff(&ga.node_features[h].select_rows(p)) <= 1e-12);
    }
    assert!(gb.weight_features[0].max_abs_diff(&ga.weight_features[0].select_rows(&pi.perms[0])) == 0.0);
}

#[test]
fn alignment_preserves_function() {
    let mut r = rng(5);
    for trial in 0..10u64 {
        let a = model(vec![12, 9, 7, 5], trial);
        let pi = random_perms(&a.spec.layer_sizes, &mut r);
        let b = apply_permutations(&a, &pi).unwrap();
        let x = Matrix::from_fn(100, 12, |_, _| r.gen_range(-2.0..2.0));
        let diff = a.forward(&x).unwrap().max_abs_diff(&b.forward(&x).unwrap());
        assert!(diff <= 1e-9, "trial {trial}: {diff}");
        assert_eq!(apply_permutations(&b, &pi.inverse()).unwrap(), a);
    }
}

#[test]
fn matched_fusion_of_clone_reproduces_model() {
    let a = model(vec![6, 5, 5, 3], 21);
    let (b, _) = permuted_clone(&a, &mut rng(21));
    let probe = random_probe(20, 6, 21);
    let ga = build_graph(&a, &probe).unwrap();
    let share_b = perturb_graph(&build_graph(&b, &probe).unwrap(), &PerturbConfig::disabled(), &NoiseSpec::new(0)).unwrap();
    let out = match_models(&ga, &share_b, &SolverConfig::default()).unwrap();
    let aligned = apply_permutations(&b, &out.perms).unwrap();
    assert_eq!(aligned, a);
    for alpha in [0.0, 0.3, 0.5, 1.0] {
        let fused = fuse_weights(&a, &aligned, alpha, FusionRule::Convex).unwrap();
        for (f, w) in fused.weights.iter().zip(&a.weights) {
            assert!(f.max_abs_diff(w) <= 1e-15);
        }
    }
}

#[test]
fn objective_rejects_mismatched_architectures() {
    let a = model(vec![4, 3, 3, 2], 1);
    let b = model(vec![4, 3, 4, 2], 1);
    let probe = random_probe(5, 4, 1);
    let ga = build_graph(&a, &probe).unwrap();
    let share_b = perturb_graph(&build_graph(&b, &probe).unwrap(), &PerturbConfig::disabled(), &NoiseSpec::new(0)).unwrap();
    assert!(match_models(&ga, &share_b, &SolverConfig::default()).is_err());
    let id = fusekit::PermutationSet::identity(&a.spec.layer_sizes);
    assert!(matching_objective(&ga, &share_b, &id, &SolverConfig::default()).is_err());
}
