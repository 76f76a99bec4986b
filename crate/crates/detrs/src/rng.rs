//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a generator derived from
//! the run seed plus a stable tuple of context words (step, block index,
//! worker id, ...). Streams are therefore independent of execution order and
//! reproducible across runs, which is what makes checkpoint resume
//! bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold context words into a single seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f6a8885a308d3u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Generator for the given context.
pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
