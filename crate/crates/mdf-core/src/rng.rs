//! Seed-derived RNG streams.
//!
//! Every stochastic site derives its own generator from (root seed, stream
//! label, index). Streams never share state, so changing the order of
//! independent work — or resuming a run mid-way — cannot shift anyone's
//! random numbers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix of a root seed, a site label, and an index
/// (splitmix64-style finalizer).
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = root ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h
}

pub fn stream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}
