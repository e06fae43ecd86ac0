//! Two-party exchange: message schema, framing, session state machine,
//! transports and the session engine.

mod engine;
mod machine;
mod transport;

pub use engine::{
    run_loopback, run_multiparty, run_session, AlphaChoice, MultipartyOutcome, PartyConfig, Role, SessionFailure, SessionOutcome,
    SessionState,
    Transcript, TranscriptLine,
};
pub use machine::{Direction, Phase, SessionMachine};
pub use transport::{loopback_pair, LoopbackTransport, StreamTransport, Transport};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ldp::{PerturbedGraph, PrivacyBudget};
use crate::linalg::Matrix;
use crate::nn::MlpModel;

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted frame body.
pub const MAX_FRAME_BYTES: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Sequence,
    ArchMismatch,
    BudgetRefused,
    InsecureRefused,
    DigestMismatch,
    Malformed,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Hello {
        protocol_version: u32,
        party_id: String,
        arch_digest: String,
        /// `None` declares test mode.
        budget: Option<PrivacyBudget>,
    },
    GraphShare {
        graph: PerturbedGraph,
    },
    AlignedWeights {
        weights: Vec<Matrix>,
        biases: Option<Vec<Vec<f64>>>,
        pfa_applied: bool,
        sfu_applied: bool,
        sfu_rescaled: bool,
    },
    FusedModel {
        digest: String,
        model: MlpModel,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
    Bye,
}

/// Payload-free discriminant of [`Message`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Hello,
    GraphShare,
    AlignedWeights,
    FusedModel,
    Error,
    Bye,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::Hello,
        MessageKind::GraphShare,
        MessageKind::AlignedWeights,
        MessageKind::FusedModel,
        MessageKind::Error,
        MessageKind::Bye,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Hello => "HELLO",
            MessageKind::GraphShare => "GRAPH_SHARE",
            MessageKind::AlignedWeights => "ALIGNED_WEIGHTS",
            MessageKind::FusedModel => "FUSED_MODEL",
            MessageKind::Error => "ERROR",
            MessageKind::Bye => "BYE",
        }
    }
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello { .. } => MessageKind::Hello,
            Message::GraphShare { .. } => MessageKind::GraphShare,
            Message::AlignedWeights { .. } => MessageKind::AlignedWeights,
            Message::FusedModel { .. } => MessageKind::FusedModel,
            Message::Error { .. } => MessageKind::Error,
            Message::Bye => MessageKind::Bye,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    pub session_id: String,
    pub seq: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(session_id: impl Into<String>, seq: u64, message: Message) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            session_id: session_id.into(),
            seq,
            message,
        }
    }
}

/// Length-prefixed frame: 4-byte big-endian body length, then the JSON body.
pub fn serialize_message(envelope: &Envelope) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(envelope).map_err(|e| Error::Malformed {
        what: "message",
        detail: e.to_string(),
    })?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::Malformed {
            what: "frame",
            detail: format!("body of {} bytes exceeds the {MAX_FRAME_BYTES} byte cap", body.len()),
        });
    }
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Inverse of [`serialize_message`]; `frame` must hold exactly one frame.
pub fn deserialize_message(frame: &[u8]) -> Result<Envelope> {
    if frame.len() < 4 {
        return Err(malformed("frame shorter than its length prefix"));
    }
    let len = check_frame_len(u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]))?;
    if frame.len() - 4 != len {
        return Err(malformed(format!("prefix announces {len} bytes, frame carries {}", frame.len() - 4)));
    }
    decode_body(&frame[4..])
}

pub(crate) fn check_frame_len(len: u32) -> Result<usize> {
    let len = len as usize;
    if len == 0 {
        return Err(malformed("zero-length frame"));
    }
    if len > MAX_FRAME_BYTES {
        return Err(malformed(format!("frame of {len} bytes exceeds the {MAX_FRAME_BYTES} byte cap")));
    }
    Ok(len)
}

fn decode_body(body: &[u8]) -> Result<Envelope> {
    #[derive(Deserialize)]
    struct VersionProbe {
        version: u32,
    }
    let probe: VersionProbe = serde_json::from_slice(body).map_err(|e| malformed(e.to_string()))?;
    if probe.version != PROTOCOL_VERSION {
        return Err(Error::Version {
            found: probe.version,
            expected: PROTOCOL_VERSION,
        });
    }
    serde_json::from_slice(body).map_err(|e| malformed(e.to_string()))
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "frame",
        detail: detail.into(),
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hello() -> Envelope {
        Envelope::new(
            "s-1",
            0,
            Message::Hello {
                protocol_version: PROTOCOL_VERSION,
                party_id: "alice".into(),
                arch_digest: "ab".repeat(32),
                budget: Some(PrivacyBudget::new(0.01, 0.1, 0.1)),
            },
        )
    }

    #[test]
    fn hello_round_trip() {
        let env = hello();
        let frame = serialize_message(&env).unwrap();
        assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 4);
        assert_eq!(deserialize_message(&frame).unwrap(), env);
        assert_eq!(serialize_message(&deserialize_message(&frame).unwrap()).unwrap(), frame);
    }

    #[test]
    fn zero_length_and_truncation() {
        assert!(matches!(deserialize_message(&[0, 0, 0, 0]), Err(Error::Malformed { .. })));
        let frame = serialize_message(&hello()).unwrap();
        assert!(deserialize_message(&frame[..frame.len() - 1]).is_err());
        assert!(deserialize_message(&[0, 0]).is_err());
    }

    #[test]
    fn oversize_prefix_rejected() {
        assert!(check_frame_len(u32::MAX).is_err());
        assert!(check_frame_len((MAX_FRAME_BYTES + 1) as u32).is_err());
        assert_eq!(check_frame_len(5).unwrap(), 5);
    }

    #[test]
    fn unknown_version_rejected() {
        let mut env = hello();
        env.version = 7;
        let frame = serialize_message(&env).unwrap();
        assert!(matches!(deserialize_message(&frame), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn bye_is_tagged() {
        let frame = serialize_message(&Envelope::new("x", 3, Message::Bye)).unwrap();
        let text = std::str::from_utf8(&frame[4..]).unwrap();
        assert_eq!(text, r#"{"version":1,"session_id":"x","seq":3,"message":{"type":"BYE"}}"#);
    }
}
