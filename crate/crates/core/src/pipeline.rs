//! Offline run of the two-party exchange, step for step the same computation
//! the protocol performs, without the transport.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::fusion::{alpha_sweep, apply_permutations, fuse_weights, pfa_transform, FusionConfig, FusionReport};
use crate::graph::{build_graph, ModelGraph};
use crate::ldp::{perturb_graph, NoiseSpec, PerturbConfig, PerturbedGraph, Privacy};
use crate::linalg::Matrix;
use crate::matching::{match_models, MatchOutcome, PermutationSet, SolverConfig};
use crate::nn::MlpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub perturb: PerturbConfig,
    pub solver: SolverConfig,
    pub fusion: FusionConfig,
}

impl PipelineConfig {
    pub fn privacy(&self) -> &Privacy {
        &self.perturb.privacy
    }

    /// PFA privacy setting: the graph budget when PFA is enabled, otherwise off.
    pub fn pfa_privacy(&self) -> Privacy {
        if self.fusion.pfa_enabled {
            self.perturb.privacy
        } else {
            Privacy::Disabled
        }
    }
}

/// Graph built from `model` over `probe` and its shareable perturbation.
pub fn share_graph(
    model: &MlpModel,
    probe: &Matrix,
    perturb: &PerturbConfig,
    noise: &NoiseSpec,
) -> Result<(ModelGraph, PerturbedGraph)> {
    let graph = build_graph(model, probe)?;
    let shared = perturb_graph(&graph, perturb, noise)?;
    Ok((graph, shared))
}

/// Matches `own` against the reference party's share and returns `own`
/// rearranged into the reference neuron order together with the raw matching.
pub fn align_to_reference(
    own_model: &MlpModel,
    own_graph: &ModelGraph,
    reference: &PerturbedGraph,
    solver: &SolverConfig,
) -> Result<(MlpModel, MatchOutcome)> {
    let outcome = match_models(own_graph, reference, solver)?;
    // outcome.perms[a] = reference neuron paired with own neuron a
    let aligned = apply_permutations(own_model, &outcome.perms.inverse())?;
    Ok((aligned, outcome))
}

/// Everything produced before the fusion step.
#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    /// Maps responder neurons to initiator neurons.
    pub matching: MatchOutcome,
    /// Permutation applied to the responder model, new neuron `a` = old `perms[a]`.
    pub alignment: PermutationSet,
    /// Responder model in initiator order, before PFA. Never shared.
    pub responder_aligned: MlpModel,
    /// Post-PFA weights each party releases.
    pub initiator_shared: MlpModel,
    pub responder_shared: MlpModel,
}

impl OfflineOutcome {
    pub fn fuse(&self, alpha: f64, cfg: &FusionConfig) -> Result<MlpModel> {
        fuse_weights(&self.initiator_shared, &self.responder_shared, alpha, cfg.rule)
    }

    pub fn sweep(&self, test: &LabeledDataset, cfg: &FusionConfig) -> Result<FusionReport> {
        cfg.validate()?;
        alpha_sweep(&self.initiator_shared, &self.responder_shared, test, &cfg.alphas, cfg.rule)
    }
}

/// Runs the exchange offline. The responder aligns itself to the initiator's
/// neuron order; both sides then pass their weights through PFA.
pub fn run_offline(
    initiator: &MlpModel,
    responder: &MlpModel,
    probe: &Matrix,
    cfg: &PipelineConfig,
    initiator_noise: &NoiseSpec,
    responder_noise: &NoiseSpec,
) -> Result<OfflineOutcome> {
    cfg.solver.validate()?;
    cfg.fusion.validate()?;
    let (_, share_i) = share_graph(initiator, probe, &cfg.perturb, initiator_noise)?;
    let graph_r = build_graph(responder, probe)?;
    let (responder_aligned, matching) = align_to_reference(responder, &graph_r, &share_i, &cfg.solver)?;
    let pfa = cfg.pfa_privacy();
    let initiator_shared = pfa_transform(initiator, &pfa, initiator_noise, cfg.fusion.pfa)?;
    let responder_shared = pfa_transform(&responder_aligned, &pfa, responder_noise, cfg.fusion.pfa)?;
    Ok(OfflineOutcome {
        alignment: matching.perms.inverse(),
        matching,
        responder_aligned,
        initiator_shared,
        responder_shared,
    })
}
