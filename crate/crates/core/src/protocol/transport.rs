use std::io::{Read, Write};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::check_frame_len;
use crate::error::{Error, Result};

/// Reliable, ordered delivery of whole frames (prefix included).
pub trait Transport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
    /// Whether this binding permits test-mode sessions.
    fn allows_insecure(&self) -> bool {
        false
    }
}

/// In-process transport built from a pair of queues.
pub struct LoopbackTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
    insecure: bool,
}

/// Two connected loopback endpoints.
pub fn loopback_pair() -> (LoopbackTransport, LoopbackTransport) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    let mk = |tx, rx| LoopbackTransport {
        tx,
        rx,
        timeout: Duration::from_secs(600),
        insecure: false,
    };
    (mk(tx_a, rx_a), mk(tx_b, rx_b))
}

impl LoopbackTransport {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Allows test-mode sessions over this endpoint.
    pub fn insecure(mut self, allow: bool) -> Self {
        self.insecure = allow;
        self
    }
}

impl Transport for LoopbackTransport {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::Transport("peer endpoint closed".into()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(Error::Transport("receive timed out".into())),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("peer endpoint closed".into())),
        }
    }

    fn allows_insecure(&self) -> bool {
        self.insecure
    }
}

/// Frames over any reliable byte stream, e.g. a `TcpStream`.
pub struct StreamTransport<S> {
    stream: S,
    insecure: bool,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, insecure: false }
    }

    pub fn insecure(mut self, allow: bool) -> Self {
        self.insecure = allow;
        self
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.stream
            .write_all(frame)
            .and_then(|_| self.stream.flush())
            .map_err(|e| Error::Transport(e.to_string()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut prefix = [0u8; 4];
        self.stream
            .read_exact(&mut prefix)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let len = check_frame_len(u32::from_be_bytes(prefix))?;
        let mut frame = vec![0u8; len + 4];
        frame[..4].copy_from_slice(&prefix);
        self.stream
            .read_exact(&mut frame[4..])
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(frame)
    }

    fn allows_insecure(&self) -> bool {
        self.insecure
    }
}
