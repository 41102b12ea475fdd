//! Deterministic derivation of independent RNG streams from one base seed.
//!
//! Each consumer (parameter init, data order, augmentation, per-scene
//! generation) draws from its own labeled stream, so adding or removing a
//! consumer never shifts another's values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for the sub-stream `(base, label, index)`.
pub fn derive(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(base ^ fnv1a64(label) ^ index.wrapping_mul(0x9e3779b97f4a7c15))
}

pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, label, 0))
}
