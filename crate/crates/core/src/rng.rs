//! Deterministic random-stream derivation.
//!
//! Every stochastic component draws from a stream derived as
//! `hash(seed, label, parts...)`, so trajectories within a group (and groups
//! within a run) are reproducible independent of sampling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent ChaCha stream from a master seed plus a label and
/// an arbitrary list of integer coordinates (task id, trajectory index, ...).
pub fn derive_rng(seed: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
