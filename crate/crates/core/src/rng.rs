//! Deterministic random-stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! the single root seed plus a stable textual label, so changing how one
//! subsystem consumes randomness never shifts another subsystem's stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream from the root seed and a stable label.
pub fn derive(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()))
}

/// Stream for a labelled subsystem plus an index (fold, epoch, sample, ...).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = fnv1a(label.as_bytes());
    h = h.wrapping_mul(0x100000001b3).wrapping_add(index);
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
