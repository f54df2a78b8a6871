//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a
//! SplitMix64 mix of a base seed and a stream tag, so streams never alias
//! and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_LOG_NOISE: u64 = 0x6c6f_675f_6e6f_6973;
pub const STREAM_RACETRACK: u64 = 0x7261_6365_7472_6b00;
pub const STREAM_EPISODE: u64 = 0x6570_6973_6f64_6500;
pub const STREAM_ACTIONS: u64 = 0x6163_7469_6f6e_7300;
pub const STREAM_UPDATE: u64 = 0x7570_6461_7465_0000;
pub const STREAM_INIT: u64 = 0x696e_6974_0000_0000;
pub const STREAM_EVAL: u64 = 0x6576_616c_0000_0000;
pub const STREAM_CALIBRATE: u64 = 0x6361_6c69_6272_0000;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with a tag and an index into a fresh 64-bit seed.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream).wrapping_add(splitmix64(index)))
}

pub fn rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
