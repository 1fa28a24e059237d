//! Seed derivation for reproducible, schedule-independent random streams.
//!
//! Every random decision in the simulator draws from a ChaCha stream keyed
//! by a master seed plus a path of tags (stage, client id, round, ...).
//! Streams never depend on the order in which work is executed, so results
//! are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags separating the streams of different pipeline stages.
pub mod tag {
    pub const BLOB_MEANS: u64 = 1;
    pub const BLOB_SAMPLES: u64 = 2;
    pub const NOISE_PROJECTION: u64 = 3;
    pub const NOISE_RATE: u64 = 4;
    pub const NOISE_DRAW: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const LOCAL_TRAIN: u64 = 8;
    pub const PARTICIPATION: u64 = 9;
    pub const ENSEMBLE: u64 = 10;
    pub const WARMUP: u64 = 11;
    pub const TRANSITION: u64 = 12;
    pub const CORRECTION: u64 = 13;
    pub const BASELINE: u64 = 14;
    pub const TEST_SET: u64 = 15;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tag path into a child seed. Order of tags matters.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
