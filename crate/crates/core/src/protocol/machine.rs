use serde::{Deserialize, Serialize};

use super::MessageKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Init,
    HelloExchanged,
    GraphShared,
    Matched,
    WeightsExchanged,
    Fused,
    Closed,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Closed | Phase::Failed)
    }

    /// The message both sides exchange in this phase, and the phase that
    /// follows once it has gone both ways. `GraphShared` has no message; it
    /// ends with the local matching step.
    fn exchange(self) -> Option<(MessageKind, Phase)> {
        match self {
            Phase::Init => Some((MessageKind::Hello, Phase::HelloExchanged)),
            Phase::HelloExchanged => Some((MessageKind::GraphShare, Phase::GraphShared)),
            Phase::Matched => Some((MessageKind::AlignedWeights, Phase::WeightsExchanged)),
            Phase::WeightsExchanged => Some((MessageKind::FusedModel, Phase::Fused)),
            Phase::Fused => Some((MessageKind::Bye, Phase::Closed)),
            Phase::GraphShared | Phase::Closed | Phase::Failed => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

/// Legal-transition table of one session side.
///
/// Each exchange phase accepts its message once in each direction, in either
/// order; the phase advances when both have happened. `ERROR` moves any live
/// phase to `Failed`. Every rejected event also moves the machine to `Failed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionMachine {
    phase: Phase,
    sent: bool,
    received: bool,
}

impl Default for SessionMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionMachine {
    pub fn new() -> Self {
        Self {
            phase: Phase::Init,
            sent: false,
            received: false,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Whether `kind` in `direction` is legal right now, without changing state.
    pub fn allows(&self, direction: Direction, kind: MessageKind) -> bool {
        if self.phase.is_terminal() {
            return false;
        }
        if kind == MessageKind::Error {
            return true;
        }
        match self.phase.exchange() {
            Some((expected, _)) if expected == kind => match direction {
                Direction::Sent => !self.sent,
                Direction::Received => !self.received,
            },
            _ => false,
        }
    }

    pub fn on_message(&mut self, direction: Direction, kind: MessageKind) -> Result<Phase> {
        if !self.allows(direction, kind) {
            let phase = self.phase;
            self.fail();
            return Err(Error::Sequence(format!(
                "{} {} not allowed in phase {phase:?}",
                kind.as_str(),
                match direction {
                    Direction::Sent => "sent",
                    Direction::Received => "received",
                }
            )));
        }
        if kind == MessageKind::Error {
            self.fail();
            return Ok(self.phase);
        }
        match direction {
            Direction::Sent => self.sent = true,
            Direction::Received => self.received = true,
        }
        if self.sent && self.received {
            let (_, next) = self.phase.exchange().expect("exchange phase");
            self.advance(next);
        }
        Ok(self.phase)
    }

    /// Local matching finished.
    pub fn on_matched(&mut self) -> Result<Phase> {
        if self.phase != Phase::GraphShared {
            let phase = self.phase;
            self.fail();
            return Err(Error::Sequence(format!("matching completed in phase {phase:?}")));
        }
        self.advance(Phase::Matched);
        Ok(self.phase)
    }

    pub fn fail(&mut self) {
        self.advance(Phase::Failed);
    }

    fn advance(&mut self, next: Phase) {
        self.phase = next;
        self.sent = false;
        self.received = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Direction::*;
    use MessageKind::*;

    #[test]
    fn happy_path() {
        let mut m = SessionMachine::new();
        assert_eq!(m.on_message(Sent, Hello).unwrap(), Phase::Init);
        assert_eq!(m.on_message(Received, Hello).unwrap(), Phase::HelloExchanged);
        m.on_message(Received, GraphShare).unwrap();
        assert_eq!(m.on_message(Sent, GraphShare).unwrap(), Phase::GraphShared);
        assert_eq!(m.on_matched().unwrap(), Phase::Matched);
        m.on_message(Sent, AlignedWeights).unwrap();
        assert_eq!(m.on_message(Received, AlignedWeights).unwrap(), Phase::WeightsExchanged);
        m.on_message(Sent, FusedModel).unwrap();
        assert_eq!(m.on_message(Received, FusedModel).unwrap(), Phase::Fused);
        m.on_message(Sent, Bye).unwrap();
        assert_eq!(m.on_message(Received, Bye).unwrap(), Phase::Closed);
        assert!(m.on_message(Sent, Error).is_err());
    }

    #[test]
    fn graph_share_before_hello_fails() {
        let mut m = SessionMachine::new();
        assert!(matches!(m.on_message(Sent, GraphShare), Err(crate::Error::Sequence(_))));
        assert_eq!(m.phase(), Phase::Failed);
    }

    #[test]
    fn duplicates_and_early_match_fail() {
        let mut m = SessionMachine::new();
        m.on_message(Sent, Hello).unwrap();
        assert!(m.on_message(Sent, Hello).is_err());
        let mut m = SessionMachine::new();
        assert!(m.on_matched().is_err());
        assert_eq!(m.phase(), Phase::Failed);
    }

    #[test]
    fn error_fails_from_live_phase() {
        let mut m = SessionMachine::new();
        m.on_message(Sent, Hello).unwrap();
        assert_eq!(m.on_message(Received, Error).unwrap(), Phase::Failed);
    }
}
