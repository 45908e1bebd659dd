//! Seeded random substreams.
//!
//! Every random draw in the crate comes from a generator keyed by
//! `(root seed, stream tag, index)`. Rows of a batch, grid points of a sweep and
//! steps of a training run each own a substream, so results never depend on
//! evaluation order or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct consumers of randomness never share a tag.
pub mod tag {
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const POSITIVE_NOISE: u64 = 0x706f_7369;
    pub const MC_PAIRS: u64 = 0x6d63_7061;
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const TIMES: u64 = 0x7469_6d65;
    pub const BATCH: u64 = 0x6261_7463;
    pub const DATA: u64 = 0x6461_7461;
    pub const EVAL: u64 = 0x6576_616c;
    pub const PROBE: u64 = 0x7072_6f62;
    pub const FUZZ: u64 = 0x6675_7a7a;
    pub const SAMPLE: u64 = 0x7361_6d70;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed, a tag and an index.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

/// Independent generator for `(seed, tag, index)`.
pub fn substream(seed: u64, tag: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, tag, index))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
