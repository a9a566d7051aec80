//! Deterministic RNG streams derived from a run seed.
//!
//! Every random decision draws from a stream keyed by its role and position
//! (iteration, prompt, sample), so results do not depend on worker count or
//! on whether a run was resumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `seed` keyed by `parts`.
pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    let key = parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Role tags for [`stream`].
pub mod role {
    pub const INIT: u64 = 1;
    pub const EXTEND: u64 = 2;
    pub const EXPLORE: u64 = 3;
    pub const LEARN: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PRETRAIN: u64 = 6;
}
