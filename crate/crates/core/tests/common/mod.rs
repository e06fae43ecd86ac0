//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use fusekit::data::{load_idx, partition, synth_blobs};
use fusekit::fusion::apply_permutations;
use fusekit::graph::ModelGraph;
use fusekit::ldp::PerturbedGraph;
use fusekit::matching::matching_objective;
use fusekit::nn::train_sgd;
use fusekit::{Activation, LabeledDataset, MlpModel, MlpSpec, PartitionPlan, PermutationSet, SolverConfig, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn random_perms(layer_sizes: &[usize], rng: &mut ChaCha8Rng) -> PermutationSet {
    let perms = layer_sizes[1..layer_sizes.len() - 1]
        .iter()
        .map(|&n| random_perm(n, rng))
        .collect();
    PermutationSet::new(layer_sizes, perms).unwrap()
}

/// `(clone, π)` where matching the clone against the original should give `π`.
pub fn permuted_clone(model: &MlpModel, rng: &mut ChaCha8Rng) -> (MlpModel, PermutationSet) {
    let pi = random_perms(&model.spec.layer_sizes, rng);
    (apply_permutations(model, &pi.inverse()).unwrap(), pi)
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in all_perms(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Largest layer-decomposed objective over every permutation set.
pub fn brute_force_best(local: &ModelGraph, remote: &PerturbedGraph, cfg: &SolverConfig) -> f64 {
    let sizes = &local.layer_sizes;
    let hidden: Vec<usize> = sizes[1..sizes.len() - 1].to_vec();
    let mut best = f64::NEG_INFINITY;
    let mut stack: Vec<Vec<usize>> = Vec::new();
    fn rec(
        depth: usize,
        hidden: &[usize],
        stack: &mut Vec<Vec<usize>>,
        f: &mut dyn FnMut(&[Vec<usize>]),
    ) {
        if depth == hidden.len() {
            f(stack);
            return;
        }
        for p in all_perms(hidden[depth]) {
            stack.push(p);
            rec(depth + 1, hidden, stack, f);
            stack.pop();
        }
    }
    rec(0, &hidden, &mut stack, &mut |ps| {
        let set = PermutationSet::new(sizes, ps.to_vec()).unwrap();
        let v = matching_objective(local, remote, &set, cfg).unwrap();
        if v > best {
            best = v;
        }
    });
    best
}

pub const FIXTURE_SPREAD: f64 = 1.4;

/// 10 000 training and 2 000 test samples. Uses MNIST IDX files from
/// `FUSEKIT_MNIST_DIR` when present, otherwise seeded 784-dimensional blobs.
pub fn desk_dataset(seed: u64) -> (LabeledDataset, LabeledDataset, &'static str) {
    if let Some(dir) = std::env::var_os("FUSEKIT_MNIST_DIR").map(PathBuf::from) {
        let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
        let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"));
        if let (Ok(train), Ok(test)) = (train, test) {
            return (train.sample(10_000, seed), test.sample(2_000, seed), "mnist");
        }
    }
    let all = synth_blobs(10, 1200, 784, FIXTURE_SPREAD, seed).unwrap();
    let train: Vec<usize> = (0..all.len()).filter(|i| i % 1200 < 1000).collect();
    let test: Vec<usize> = (0..all.len()).filter(|i| i % 1200 >= 1000).collect();
    (all.subset(&train), all.subset(&test), "synth_blobs")
}

pub fn desk_spec() -> MlpSpec {
    MlpSpec::new(vec![784, 32, 32, 10], Activation::Relu, false).unwrap()
}

/// Two independently initialized models trained on a homogeneous split.
pub struct DeskPair {
    pub a: MlpModel,
    pub b: MlpModel,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub source: &'static str,
}

pub fn desk_pair(seed: u64) -> DeskPair {
    let (train, test, source) = desk_dataset(seed);
    let (da, db) = partition(&train, &PartitionPlan::homogeneous(), seed).unwrap();
    let cfg = |s: u64| TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 0.02,
        seed: s,
    };
    let a = train_sgd(&desk_spec(), &da, &cfg(2 * seed + 1000)).unwrap();
    let b = train_sgd(&desk_spec(), &db, &cfg(2 * seed + 1001)).unwrap();
    DeskPair {
        a,
        b,
        train,
        test,
        source,
    }
}
