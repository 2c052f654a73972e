//! Named RNG streams derived from a master seed.
//!
//! A stream is identified by a label (typically a parameter path) so the
//! numbers it yields do not depend on the order in which streams are opened.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive a 64-bit seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Derive a seed from a master seed and a sequence of integer keys.
pub fn derive_seed_indexed(master: u64, label: &str, keys: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    for k in keys {
        hasher.update(k.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

pub fn stream_indexed(master: u64, label: &str, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(master, label, keys))
}
