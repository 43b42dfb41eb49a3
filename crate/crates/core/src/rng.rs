//! Splittable random streams.
//!
//! Every unit of work (worker, batch, example, ...) gets its own ChaCha8
//! stream addressed by a path of integers under the master seed, so results
//! never depend on which thread ran what.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut id = splitmix(path.len() as u64);
    for &p in path {
        id = splitmix(id ^ splitmix(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Well-known stream tags.
pub mod tag {
    pub const GENERATE: u64 = 1;
    pub const DISTANCE_TEST: u64 = 2;
    pub const BATCH_EXAMPLE: u64 = 3;
    pub const BATCH_START: u64 = 4;
    pub const BATCH_NOISE: u64 = 5;
    pub const STAGE2_EXAMPLE: u64 = 6;
    pub const STAGE2_START: u64 = 7;
    pub const STAGE2_NOISE: u64 = 8;
    pub const POOL: u64 = 9;
    pub const BENCH: u64 = 10;
    pub const ATTACK: u64 = 11;
}
