//! Deterministic stream derivation. Every random draw in the crate comes
//! from a ChaCha stream keyed by the master seed plus a tag path, so runs
//! replay bit-for-bit and resuming at an epoch boundary re-derives the same
//! streams without serializing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 256-bit stream key for `(master, tags...)`. Tags are length-prefixed so
/// distinct paths can never collide by concatenation.
pub fn stream_key(master: u64, tags: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for tag in tags {
        h.update((tag.len() as u64).to_le_bytes());
        h.update(tag.as_bytes());
    }
    h.finalize().into()
}

pub fn stream_rng(master: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_key(master, tags))
}

/// Derived sub-seed for components that take a plain `u64` seed (mask
/// sources, nested runs). First eight key bytes, little-endian.
pub fn derive_u64(master: u64, tags: &[&str]) -> u64 {
    let key = stream_key(master, tags);
    u64::from_le_bytes(key[..8].try_into().expect("key has 32 bytes"))
}
