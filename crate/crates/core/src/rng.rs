//! Deterministic per-purpose RNG streams.
//!
//! Every random decision in a run draws from a stream derived from the run
//! seed plus a salt path (e.g. `(round, client_id)`), so results never
//! depend on execution order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts. Each call site gets its own constant so streams never collide.
pub mod salt {
    pub const CLIENT_SAMPLE: u64 = 0x01;
    pub const CLIENT_TRAIN: u64 = 0x02;
    pub const ADVERSARY_SLOT: u64 = 0x03;
    pub const AGGREGATE: u64 = 0x04;
    pub const SCHEDULE: u64 = 0x05;
    pub const INIT: u64 = 0x06;
    pub const CORPUS: u64 = 0x07;
    pub const PARTITION: u64 = 0x08;
    pub const SPLIT: u64 = 0x09;
    pub const BACKDOOR_TEST: u64 = 0x0a;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG from a seed and a salt path.
pub fn derive(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &p in path {
        state = splitmix64(state ^ p.wrapping_mul(0x9e3779b97f4a7c15));
    }
    ChaCha8Rng::seed_from_u64(state)
}
