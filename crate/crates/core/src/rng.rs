//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from a [`DspRng`] obtained via
//! [`stream`], keyed by a master seed, a purpose tag and an index. Streams for
//! different `(tag, index)` pairs are independent, so results never depend on
//! the order in which work items are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DspRng = ChaCha8Rng;

pub mod tag {
    pub const INIT: u64 = 1;
    pub const RESET: u64 = 2;
    pub const EPISODE: u64 = 3;
    pub const PERTURB: u64 = 4;
    pub const STAGE1_BATCH: u64 = 10;
    pub const STAGE1_NOISE: u64 = 11;
    pub const STAGE2_BATCH: u64 = 20;
    pub const STAGE2_NOISE: u64 = 21;
    pub const FILTER: u64 = 22;
    pub const OFFLINE_FILTER: u64 = 23;
    pub const BOOTSTRAP: u64 = 30;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ splitmix64(index)))
}

pub fn stream(seed: u64, tag: u64, index: u64) -> DspRng {
    DspRng::seed_from_u64(derive_seed(seed, tag, index))
}
