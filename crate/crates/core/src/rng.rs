//! Seeded randomness.
//!
//! All stochastic choices go through ChaCha8 (`rand_chacha::ChaCha8Rng`)
//! streams whose 64-bit seeds are derived with the SplitMix64 finaliser from
//! a base seed and a stream index. Both algorithms are fixed and portable,
//! so outputs are identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD605_BBB5_8C8A_BBFD))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream identifiers used by the different consumers of one base seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const POLICY: u64 = 4;
    pub const ENCODER: u64 = 5;
}
