//! Deterministic random-number streams.
//!
//! Every random draw in a simulation comes from a stream keyed by
//! `(seed, tags...)`, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream purposes.
pub mod tag {
    pub const TRUTH: u64 = 1;
    pub const RUN: u64 = 2;
    pub const MEASUREMENT: u64 = 3;
    pub const PRIOR: u64 = 4;
    pub const PREDICT: u64 = 5;
    pub const MESSAGE: u64 = 6;
    pub const UPDATE: u64 = 7;
    pub const TARGET_PREDICT: u64 = 8;
    pub const TARGET_MESSAGE: u64 = 9;
    pub const TARGET_RESAMPLE: u64 = 10;
    pub const EXTRINSIC: u64 = 11;
    pub const DTT: u64 = 12;
    pub const REGULARIZE: u64 = 13;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of tags into a new 64-bit seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |h, &t| splitmix64(h ^ splitmix64(t.wrapping_add(0xA5A5))))
}

pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(seed, tags))
}
