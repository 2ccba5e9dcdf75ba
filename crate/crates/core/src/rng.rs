//! Seeded random streams.
//!
//! Every stochastic step draws from a stream keyed by a master seed and a
//! path of integers (epoch, sample index, trial, ...). Work split across
//! threads therefore produces the same numbers as a serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same master seed apart.
pub mod tag {
    pub const INIT: u64 = 0x494e4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const AUGMENT: u64 = 0x4155_474d;
    pub const EVAL: u64 = 0x4556_414c;
    pub const DATA: u64 = 0x4441_5441;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const TRIAL: u64 = 0x5452_494c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a path of integers into a single 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
