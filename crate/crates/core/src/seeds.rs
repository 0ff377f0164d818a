//! Deterministic seed derivation for independent RNG streams.
//!
//! Every randomized stage draws from its own ChaCha stream derived from the
//! run seed plus a stage tag, so reordering or skipping stages never shifts
//! the random numbers another stage sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a stage tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut h = mix(seed ^ 0x6a09e667f3bcc908);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    h
}

/// Derive a child seed carrying an index (per-view, per-cycle, ...).
pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    mix(derive(seed, tag) ^ mix(index))
}

/// ChaCha stream for a derived seed.
pub fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// ChaCha stream for a derived, indexed seed.
pub fn rng_indexed(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(seed, tag, index))
}
