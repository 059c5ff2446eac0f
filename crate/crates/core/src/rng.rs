//! Seed derivation. Every random decision in the simulator draws from a
//! ChaCha stream whose seed is a hash of the experiment seed and a list of
//! tags (stream name, client id, round, ...), so results never depend on the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const SYNTH: u64 = 1;
    pub const LONGTAIL: u64 = 2;
    pub const SHARDING: u64 = 3;
    pub const DIRICHLET: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const BALANCED_TEST: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SELECT: u64 = 8;
    pub const CLIENT: u64 = 9;
    pub const LOCAL_KMEANS: u64 = 10;
    pub const GLOBAL_KMEANS: u64 = 11;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}
