//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed. Child seeds
//! come from `derive_seed(parent, stream, index)`, a SplitMix64 mix of the
//! three values, so jobs can be scheduled in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used when deriving child seeds.
pub mod stream {
    pub const NATURE: u64 = 1;
    pub const BIAS: u64 = 2;
    pub const STATIONS: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const SYNTHESIS: u64 = 6;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parent: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(parent) ^ stream) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
