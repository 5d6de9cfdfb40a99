//! Counter-style random streams.
//!
//! Every stochastic quantity in the engine draws from its own ChaCha stream
//! whose key is a hash of the master seed and a list of labels (stage, level,
//! unit id, stratum, replicate, ...). Results therefore do not depend on the
//! order in which work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream_key(master: u64, labels: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    key
}

pub fn stream(master: u64, labels: &[&str]) -> StreamRng {
    ChaCha8Rng::from_seed(stream_key(master, labels))
}

/// Derive a child 64-bit seed, used where a component takes a plain seed.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let key = stream_key(master, labels);
    u64::from_le_bytes(key[..8].try_into().unwrap())
}
