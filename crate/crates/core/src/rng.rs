//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by `(seed, tag, counter)`, so runs are reproducible while distinct
//! consumers (noise injection, init, per-epoch shuffles) never share a stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and a counter into a fresh seed.
pub fn derive_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ counter)
}

pub fn stream(seed: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, counter))
}

/// Seeded permutation of `0..n` for the given epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, tags::SHUFFLE, epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

pub mod tags {
    pub const DATA: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const NOISE: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const SHUFFLE: u64 = 0x05;
    pub const PRETRAIN: u64 = 0x06;
    pub const TRAIN: u64 = 0x07;
}
