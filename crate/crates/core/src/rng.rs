//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by a base seed
//! and a small tuple of indices, so the streams do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of stream indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(1))))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags, kept distinct so streams never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const ROLLOUT_STATE: u64 = 2;
    pub const ROLLOUT_POLICY: u64 = 3;
    pub const UPDATE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SCENARIO: u64 = 6;
    pub const CALIBRATION: u64 = 7;
    pub const CAPTIONS: u64 = 8;
}
