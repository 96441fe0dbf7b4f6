//! Seed derivation. Every random draw in the crate starts from a `u64` seed
//! that is a pure function of the master seed and a path of stream indices,
//! so any batch or sample can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` of `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(0x6A09_E667_F3BC_C909)))
}

/// Named sub-streams so unrelated consumers of one master seed never collide.
pub mod stream {
    pub const MATRIX: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const HOLDOUT: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const CONE: u64 = 5;
    pub const THEORY: u64 = 6;
    pub const TRAIN: u64 = 7;
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
