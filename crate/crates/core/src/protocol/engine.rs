use std::fmt;

use serde::{Deserialize, Serialize};

use super::machine::{Direction, Phase, SessionMachine};
use super::transport::{loopback_pair, Transport};
use super::{deserialize_message, serialize_message, sha256_hex, Envelope, ErrorCode, Message, MessageKind, PROTOCOL_VERSION};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fusion::{alpha_sweep, fuse_weights, pfa_transform, FusionConfig, FusionReport};
use crate::graph::build_graph;
use crate::ldp::{perturb_graph, Accountant, Mechanism, NoiseSpec, PerturbConfig, Privacy, PrivacyBudget};
use crate::linalg::Matrix;
use crate::matching::{MatchOutcome, PermutationSet, SolverConfig};
use crate::nn::MlpModel;
use crate::pipeline::{align_to_reference, PipelineConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initiator,
    Responder,
}

/// How the mixing ratio of the final fusion is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaChoice {
    Fixed(f64),
    /// Best α of the configured sweep on locally held evaluation data. Both
    /// parties only agree when their evaluation sets pick the same α.
    Sweep,
}

#[derive(Debug, Clone)]
pub struct PartyConfig {
    pub role: Role,
    pub party_id: String,
    /// Chosen by the initiator; the responder adopts the one it receives.
    pub session_id: String,
    pub pipeline: PipelineConfig,
    /// Largest budget this party accepts from its peer, per component.
    pub ceiling: PrivacyBudget,
    pub alpha: AlphaChoice,
    pub noise: NoiseSpec,
    /// Must be set, along with the transport's own flag, for test-mode sessions.
    pub insecure: bool,
    /// Needed for [`AlphaChoice::Sweep`].
    pub eval: Option<LabeledDataset>,
}

impl PartyConfig {
    pub fn new(role: Role, privacy: Privacy, noise: NoiseSpec) -> Self {
        let perturb = match privacy {
            Privacy::Private(b) => PerturbConfig::private(b),
            Privacy::Disabled => PerturbConfig::disabled(),
        };
        Self {
            role,
            party_id: match role {
                Role::Initiator => "initiator".into(),
                Role::Responder => "responder".into(),
            },
            session_id: format!("{:016x}", derive_seed(noise.seed, "session")),
            pipeline: PipelineConfig {
                perturb,
                solver: SolverConfig::default(),
                fusion: FusionConfig::default(),
            },
            ceiling: PrivacyBudget::new(1.0, 1.0, 1.0),
            alpha: AlphaChoice::Fixed(0.5),
            noise,
            insecure: false,
            eval: None,
        }
    }

    pub fn privacy(&self) -> &Privacy {
        &self.pipeline.perturb.privacy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub direction: Direction,
    /// Phase after the message was handled.
    pub phase: Phase,
    #[serde(rename = "type")]
    pub kind: MessageKind,
    pub sequence: u64,
    pub byte_size: usize,
    /// SHA-256 of the frame, hex encoded.
    pub digest: String,
    /// Budget declared in a HELLO.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<PrivacyBudget>,
}

/// Message log of one side plus every frame it sent or received, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
    pub wire: Vec<u8>,
}

impl Transcript {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("transcript line serializes") + "\n")
            .collect()
    }

    fn record(&mut self, direction: Direction, phase: Phase, message: &Message, sequence: u64, frame: &[u8]) {
        let budget = match message {
            Message::Hello { budget, .. } => *budget,
            _ => None,
        };
        self.lines.push(TranscriptLine {
            direction,
            phase,
            kind: message.kind(),
            sequence,
            byte_size: frame.len(),
            digest: sha256_hex(frame),
            budget,
        });
        self.wire.extend_from_slice(frame);
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub role: Role,
    pub fused: MlpModel,
    pub fused_digest: String,
    pub alpha: f64,
    /// Present in sweep mode.
    pub sweep: Option<FusionReport>,
    /// This side's matching of its own graph against the peer's share.
    pub local_match: MatchOutcome,
    /// Permutation this side applied to its own model before PFA (identity
    /// for the initiator).
    pub alignment: PermutationSet,
    /// Budget spent by this side during the session.
    pub spent_eps: f64,
    pub peer_budget: Option<PrivacyBudget>,
    pub transcript: Transcript,
}

#[derive(Debug)]
pub struct SessionFailure {
    pub error: Error,
    pub phase: Phase,
    pub transcript: Transcript,
}

impl fmt::Display for SessionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session failed: {}", self.error)
    }
}

impl std::error::Error for SessionFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// One side of a session: state machine, sequence counters, the privacy
/// accountant and the transcript.
///
/// Sending `GRAPH_SHARE` charges the node and weight budgets, sending
/// `ALIGNED_WEIGHTS` with PFA applied charges the PFA budget. A message whose
/// budget was already consumed is refused before the state machine sees it.
#[derive(Debug)]
pub struct SessionState {
    machine: SessionMachine,
    session_id: Option<String>,
    send_seq: u64,
    recv_seq: u64,
    privacy: Privacy,
    accountant: Accountant,
    transcript: Transcript,
    /// Set once a peer ERROR or a transport failure makes replying pointless.
    peer_gone: bool,
}

impl SessionState {
    /// `session_id` is `None` for a responder, which adopts the first id it receives.
    pub fn new(session_id: Option<String>, privacy: Privacy) -> Self {
        Self {
            machine: SessionMachine::new(),
            session_id,
            send_seq: 0,
            recv_seq: 0,
            privacy,
            accountant: Accountant::new(),
            transcript: Transcript::default(),
            peer_gone: false,
        }
    }

    pub fn phase(&self) -> Phase {
        self.machine.phase()
    }

    pub fn accountant(&self) -> &Accountant {
        &self.accountant
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    fn charges(&self, message: &Message) -> Vec<(Mechanism, f64)> {
        let Privacy::Private(b) = self.privacy else {
            return Vec::new();
        };
        match message {
            Message::GraphShare { .. } => vec![(Mechanism::Laplace, b.eps_a), (Mechanism::MultiBit, b.eps_w)],
            Message::AlignedWeights { pfa_applied: true, .. } => vec![(Mechanism::Rpu, b.eps_f)],
            _ => Vec::new(),
        }
    }

    pub fn send<T: Transport + ?Sized>(&mut self, transport: &mut T, message: Message) -> Result<()> {
        let kind = message.kind();
        let charges = self.charges(&message);
        if let Some((mech, _)) = charges.iter().find(|(m, _)| self.accountant.is_charged(*m)) {
            self.machine.fail();
            return Err(Error::BudgetExhausted(format!(
                "{} budget already spent in this session",
                mech.stream_name()
            )));
        }
        if !self.machine.allows(Direction::Sent, kind) {
            return self.machine.on_message(Direction::Sent, kind).map(|_| ());
        }
        let id = self.session_id.clone().ok_or_else(|| Error::Protocol("no session id".into()))?;
        let env = Envelope::new(id, self.send_seq, message);
        let frame = serialize_message(&env)?;
        transport.send_frame(&frame).inspect_err(|_| self.peer_gone = true)?;
        for (mech, eps) in charges {
            self.accountant.charge(mech, eps)?;
        }
        let phase = self.machine.on_message(Direction::Sent, kind)?;
        self.transcript.record(Direction::Sent, phase, &env.message, self.send_seq, &frame);
        self.send_seq += 1;
        Ok(())
    }

    pub fn recv<T: Transport + ?Sized>(&mut self, transport: &mut T) -> Result<Message> {
        let frame = transport.recv_frame().inspect_err(|_| self.peer_gone = true)?;
        let env = deserialize_message(&frame)?;
        let kind = env.message.kind();
        let checked = self.check_envelope(&env).and_then(|_| self.machine.on_message(Direction::Received, kind));
        self.transcript.record(Direction::Received, self.machine.phase(), &env.message, env.seq, &frame);
        checked?;
        self.recv_seq += 1;
        if let Message::Error { code, detail } = env.message {
            self.peer_gone = true;
            return Err(Error::Protocol(format!("peer reported {code:?}: {detail}")));
        }
        Ok(env.message)
    }

    /// Local matching finished.
    pub fn mark_matched(&mut self) -> Result<()> {
        self.machine.on_matched().map(|_| ())
    }

    fn check_envelope(&mut self, env: &Envelope) -> Result<()> {
        match &self.session_id {
            None => self.session_id = Some(env.session_id.clone()),
            Some(id) if *id != env.session_id => {
                return Err(Error::Protocol(format!("session id {} does not match {id}", env.session_id)));
            }
            Some(_) => {}
        }
        if env.seq != self.recv_seq {
            return Err(Error::Sequence(format!("expected sequence {}, got {}", self.recv_seq, env.seq)));
        }
        Ok(())
    }

    /// Best-effort ERROR notification after a local failure; bypasses the
    /// state machine, which may already be in `Failed`.
    pub fn fail<T: Transport + ?Sized>(&mut self, transport: &mut T, error: &Error) {
        if !self.peer_gone {
            let code = match error {
                Error::Sequence(_) => ErrorCode::Sequence,
                Error::Architecture(_) => ErrorCode::ArchMismatch,
                Error::BudgetRefused(_) => ErrorCode::BudgetRefused,
                Error::Malformed { .. } | Error::Version { .. } => ErrorCode::Malformed,
                Error::Protocol(d) if d.contains("digest") => ErrorCode::DigestMismatch,
                Error::Protocol(d) if d.contains("test mode") => ErrorCode::InsecureRefused,
                _ => ErrorCode::Internal,
            };
            let id = self.session_id.clone().unwrap_or_default();
            let message = Message::Error {
                code,
                detail: error.to_string(),
            };
            if let Ok(frame) = serialize_message(&Envelope::new(id, self.send_seq, message.clone())) {
                if transport.send_frame(&frame).is_ok() {
                    self.transcript
                        .record(Direction::Sent, Phase::Failed, &message, self.send_seq, &frame);
                    self.send_seq += 1;
                }
            }
            self.peer_gone = true;
        }
        self.machine.fail();
    }
}

struct Session<'t, T: Transport + ?Sized> {
    transport: &'t mut T,
    state: SessionState,
}

impl<T: Transport + ?Sized> Session<'_, T> {
    fn send(&mut self, message: Message) -> Result<()> {
        self.state.send(self.transport, message)
    }

    fn recv(&mut self) -> Result<Message> {
        self.state.recv(self.transport)
    }
}

/// Runs one side of a two-party session to completion.
pub fn run_session<T: Transport + ?Sized>(
    party: &PartyConfig,
    model: &MlpModel,
    probe: &Matrix,
    transport: &mut T,
) -> std::result::Result<SessionOutcome, SessionFailure> {
    let session_id = match party.role {
        Role::Initiator => Some(party.session_id.clone()),
        Role::Responder => None,
    };
    let mut session = Session {
        transport,
        state: SessionState::new(session_id, *party.privacy()),
    };
    match drive(party, model, probe, &mut session) {
        Ok(mut outcome) => {
            outcome.spent_eps = session.state.accountant.spent();
            outcome.transcript = session.state.into_transcript();
            Ok(outcome)
        }
        Err(error) => {
            session.state.fail(session.transport, &error);
            Err(SessionFailure {
                error,
                phase: session.state.phase(),
                transcript: session.state.into_transcript(),
            })
        }
    }
}

/// Sends first as initiator, receives first as responder.
fn exchange<T: Transport + ?Sized>(role: Role, session: &mut Session<'_, T>, message: Message) -> Result<Message> {
    match role {
        Role::Initiator => {
            session.send(message)?;
            session.recv()
        }
        Role::Responder => {
            let got = session.recv()?;
            session.send(message)?;
            Ok(got)
        }
    }
}

fn drive<T: Transport + ?Sized>(
    party: &PartyConfig,
    model: &MlpModel,
    probe: &Matrix,
    session: &mut Session<'_, T>,
) -> Result<SessionOutcome> {
    let privacy = *party.privacy();
    if privacy.is_disabled() && !(party.insecure && session.transport.allows_insecure()) {
        return Err(Error::Protocol(
            "test mode refused: needs the insecure flag on both party and transport".into(),
        ));
    }
    if let Privacy::Private(b) = privacy {
        b.validate()?;
    }
    model.validate()?;
    let cfg = &party.pipeline;
    cfg.solver.validate()?;
    cfg.fusion.validate()?;
    let arch = model.arch_digest();

    // HELLO
    let hello = Message::Hello {
        protocol_version: PROTOCOL_VERSION,
        party_id: party.party_id.clone(),
        arch_digest: arch.clone(),
        budget: privacy.budget().copied(),
    };
    let peer_budget = match exchange(party.role, session, hello)? {
        Message::Hello {
            protocol_version,
            arch_digest,
            budget,
            ..
        } => {
            if protocol_version != PROTOCOL_VERSION {
                return Err(Error::Version {
                    found: protocol_version,
                    expected: PROTOCOL_VERSION,
                });
            }
            if arch_digest != arch {
                return Err(Error::Architecture("peer architecture digest differs".into()));
            }
            check_peer_budget(&privacy, budget.as_ref(), &party.ceiling)?;
            budget
        }
        _ => unreachable!("state machine admits only HELLO here"),
    };

    // GRAPH_SHARE
    let graph = build_graph(model, probe)?;
    let own_share = perturb_graph(&graph, &cfg.perturb, &party.noise)?;
    let peer_share = match exchange(party.role, session, Message::GraphShare { graph: own_share })? {
        Message::GraphShare { graph } => graph,
        _ => unreachable!("state machine admits only GRAPH_SHARE here"),
    };
    if peer_share.layer_sizes != model.spec.layer_sizes {
        return Err(Error::Architecture("peer graph layer sizes differ".into()));
    }
    peer_share.validate()?;
    if peer_share.budget.is_some() != !privacy.is_disabled() {
        return Err(Error::Protocol("peer share privacy mode differs from the declared one".into()));
    }

    // local matching; the responder moves into the initiator's order
    let (own_aligned, local_match) = align_to_reference(model, &graph, &peer_share, &cfg.solver)?;
    let (own_operand, alignment) = match party.role {
        Role::Initiator => (model.clone(), PermutationSet::identity(&model.spec.layer_sizes)),
        Role::Responder => (own_aligned, local_match.perms.inverse()),
    };
    session.state.mark_matched()?;

    // ALIGNED_WEIGHTS
    let pfa_privacy = cfg.pfa_privacy();
    let own_shared = pfa_transform(&own_operand, &pfa_privacy, &party.noise, cfg.fusion.pfa)?;
    let pfa_applied = !pfa_privacy.is_disabled();
    let aligned_msg = Message::AlignedWeights {
        weights: own_shared.weights.clone(),
        biases: own_shared.biases.clone(),
        pfa_applied,
        sfu_applied: pfa_applied && cfg.fusion.pfa.sfu,
        sfu_rescaled: pfa_applied && cfg.fusion.pfa.sfu && cfg.fusion.pfa.sfu_rescale,
    };
    let peer_shared = match exchange(party.role, session, aligned_msg)? {
        Message::AlignedWeights { weights, biases, .. } => MlpModel::new(model.spec.clone(), weights, biases)?,
        _ => unreachable!("state machine admits only ALIGNED_WEIGHTS here"),
    };
    let (initiator_shared, responder_shared) = match party.role {
        Role::Initiator => (own_shared, peer_shared),
        Role::Responder => (peer_shared, own_shared),
    };

    // fusion
    let (alpha, sweep) = match party.alpha {
        AlphaChoice::Fixed(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("alpha {a} outside [0,1]")));
            }
            (a, None)
        }
        AlphaChoice::Sweep => {
            let eval = party
                .eval
                .as_ref()
                .ok_or_else(|| Error::invalid("sweep mode needs local evaluation data"))?;
            let report = alpha_sweep(&initiator_shared, &responder_shared, eval, &cfg.fusion.alphas, cfg.fusion.rule)?;
            (report.best.alpha, Some(report))
        }
    };
    let fused = fuse_weights(&initiator_shared, &responder_shared, alpha, cfg.fusion.rule)?;
    let fused_digest = fused.digest();

    // FUSED_MODEL
    let fused_msg = Message::FusedModel {
        digest: fused_digest.clone(),
        model: fused.clone(),
    };
    match exchange(party.role, session, fused_msg)? {
        Message::FusedModel { digest, model: peer_model } => {
            if digest != fused_digest || peer_model.digest() != fused_digest {
                return Err(Error::Protocol(format!(
                    "fused model digest mismatch: local {fused_digest}, peer {digest}"
                )));
            }
        }
        _ => unreachable!("state machine admits only FUSED_MODEL here"),
    }

    // BYE
    exchange(party.role, session, Message::Bye)?;

    Ok(SessionOutcome {
        role: party.role,
        fused,
        fused_digest,
        alpha,
        sweep,
        local_match,
        alignment,
        spent_eps: 0.0,
        peer_budget,
        transcript: Transcript::default(),
    })
}

fn check_peer_budget(own: &Privacy, peer: Option<&PrivacyBudget>, ceiling: &PrivacyBudget) -> Result<()> {
    match (own, peer) {
        (Privacy::Disabled, None) => Ok(()),
        (Privacy::Disabled, Some(_)) | (Privacy::Private(_), None) => {
            Err(Error::BudgetRefused("peer privacy mode differs from the local one".into()))
        }
        (Privacy::Private(_), Some(b)) => {
            b.validate().map_err(|e| Error::BudgetRefused(e.to_string()))?;
            if !b.within(ceiling) {
                return Err(Error::BudgetRefused(format!(
                    "peer declares ({}, {}, {}) above ceiling ({}, {}, {})",
                    b.eps_a, b.eps_w, b.eps_f, ceiling.eps_a, ceiling.eps_w, ceiling.eps_f
                )));
            }
            Ok(())
        }
    }
}

/// Both sides of one session over an in-process loopback, responder on a
/// scoped thread.
pub fn run_loopback(
    initiator: &PartyConfig,
    initiator_model: &MlpModel,
    responder: &PartyConfig,
    responder_model: &MlpModel,
    probe: &Matrix,
) -> (
    std::result::Result<SessionOutcome, SessionFailure>,
    std::result::Result<SessionOutcome, SessionFailure>,
) {
    let (ti, tr) = loopback_pair();
    let mut ti = ti.insecure(initiator.insecure);
    let mut tr = tr.insecure(responder.insecure);
    std::thread::scope(|s| {
        let handle = s.spawn(move || run_session(responder, responder_model, probe, &mut tr));
        let a = run_session(initiator, initiator_model, probe, &mut ti);
        drop(ti);
        let b = handle.join().expect("responder thread panicked");
        (a, b)
    })
}

#[derive(Debug, Clone)]
pub struct MultipartyOutcome {
    pub fused: MlpModel,
    /// Initiator-side outcome of every pairwise session.
    pub sessions: Vec<SessionOutcome>,
    /// Budget each owner's data has been exposed under, summed over sessions.
    pub per_owner_eps: Vec<f64>,
    /// Largest per-owner total.
    pub total_eps: f64,
}

/// Sequential pairwise fusion: `F₁ = fuse(M₀, M₁)`, `F₂ = fuse(F₁, M₂)`, ….
///
/// The holder of the running result is always the initiator and uses
/// `parties[0]`, with a fresh noise seed per session after the first.
/// `parties[k]` configures owner `k` as responder.
pub fn run_multiparty(
    models: &[MlpModel],
    probe: &Matrix,
    parties: &[PartyConfig],
) -> std::result::Result<MultipartyOutcome, SessionFailure> {
    let fail = |msg: &str| SessionFailure {
        error: Error::invalid(msg),
        phase: Phase::Init,
        transcript: Transcript::default(),
    };
    if models.len() < 2 {
        return Err(fail("multiparty fusion needs at least two models"));
    }
    if parties.len() != models.len() {
        return Err(fail("one party configuration per model is required"));
    }
    let mut current = models[0].clone();
    let mut sessions = Vec::with_capacity(models.len() - 1);
    let mut per_owner_eps = vec![0.0; models.len()];
    for k in 0..models.len() - 1 {
        let mut init = parties[0].clone();
        init.role = Role::Initiator;
        if k > 0 {
            init.noise = NoiseSpec::new(derive_seed(parties[0].noise.seed, &format!("session-{k}")));
            init.session_id = format!("{}-{k}", parties[0].session_id);
        }
        let mut resp = parties[k + 1].clone();
        resp.role = Role::Responder;
        let (a, b) = run_loopback(&init, &current, &resp, &models[k + 1], probe);
        let a = a?;
        let b = b?;
        // the running result carries owners 0..=k; all of them are exposed again
        for eps in per_owner_eps.iter_mut().take(k + 1) {
            *eps += a.spent_eps;
        }
        per_owner_eps[k + 1] += b.spent_eps;
        current = a.fused.clone();
        sessions.push(a);
    }
    let total_eps = per_owner_eps.iter().copied().fold(0.0, f64::max);
    Ok(MultipartyOutcome {
        fused: current,
        sessions,
        per_owner_eps,
        total_eps,
    })
}
