//! Named, seeded random substreams.
//!
//! Every randomized step draws from its own ChaCha20 stream whose 32-byte key is
//! `SHA-256("fusekit/stream/v1" || seed (u64 LE) || name || 0x00 || index (u64 LE))`.
//! Keying by name and index lets layers be processed in any order with
//! identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(b"fusekit/stream/v1");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(key)
}

/// Derives a child seed, used when one user-facing seed fans out into several
/// independent components (e.g. model A vs model B training).
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fusekit/seed/v1");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
