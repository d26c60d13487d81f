//! Derived random streams.
//!
//! Every consumer of randomness (bank init, prompt init, batch order, each
//! generated sample) draws from its own stream keyed by a path of integers, so
//! adding or removing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key path into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_5eed_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags, so call sites read as `rng_for(&[seed, stream::BANK])`.
pub mod stream {
    pub const BACKBONE: u64 = 1;
    pub const PROMPTS: u64 = 2;
    pub const BANK: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const SAMPLES: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const PRETRAIN: u64 = 7;
    pub const AUGMENT: u64 = 8;
}
