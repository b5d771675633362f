//! Seeded randomness.
//!
//! Sequential draws use ChaCha8 with an explicit 64-bit seed and a numbered
//! stream per purpose, so adding draws to one purpose never shifts another.
//! Per-broadcast reception draws are counter-based: a SplitMix64 finalizer
//! over the packed event key, so two schemes that broadcast the same
//! `(frame, user, view, link, copy)` see the same uniform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream numbers used by the simulator and the oracles.
pub mod stream {
    pub const ORACLE: u64 = 1;
    pub const WORKLOAD: u64 = 2;
    pub const PLACEMENT: u64 = 3;
    pub const RECEPTION: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a sequence of words into one 64-bit value.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C909, |acc, &w| splitmix64(acc ^ w))
}

/// Uniform in `[0, 1)` keyed by `words`.
pub fn keyed_uniform(words: &[u64]) -> f64 {
    (mix(words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
