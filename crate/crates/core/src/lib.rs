//! Private alignment and fusion of independently trained dense networks.
//!
//! The pipeline has four stages:
//!
//! 1. [`graph`]: each owner turns its model into a layered graph view, with
//!    per-neuron activation vectors over a shared probe set and per-neuron
//!    incoming weight rows.
//! 2. [`ldp`]: the shareable part of that graph is randomized locally
//!    (Laplace noise on activations, multi-bit encoding on weight rows).
//! 3. [`matching`]: a layer-decomposed graduated-assignment solver aligns the
//!    neurons of the local model with the remote perturbed graph.
//! 4. [`fusion`]: aligned weights pass through the perturbation-filter adapter
//!    and are averaged in weight space over a sweep of mixing ratios.
//!
//! [`protocol`] runs the same pipeline as a two-party session over a byte
//! transport; [`pipeline`] is the offline equivalent.

pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod ldp;
pub mod linalg;
pub mod matching;
pub mod nn;
pub mod pipeline;
pub mod protocol;
pub mod rng;

pub use data::{LabeledDataset, MetricReport, PartitionKind, PartitionPlan};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionReport, FusionRule};
pub use graph::ModelGraph;
pub use ldp::{NoiseSpec, PerturbedGraph, PrivacyBudget};
pub use linalg::Matrix;
pub use matching::{PermutationSet, SolverConfig};
pub use nn::{Activation, MlpModel, MlpSpec, TrainConfig};
