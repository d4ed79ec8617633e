//! Counter-based seed derivation: every random stream is a pure function
//! of the run seed and a tuple of counters, never of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stream tags, so unrelated consumers never share a stream.
pub mod tag {
    pub const SHAPE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
    pub const SHUFFLE: u64 = 8;
}
