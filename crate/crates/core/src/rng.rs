//! Seeded random streams.
//!
//! Every stochastic quantity is drawn from a ChaCha stream derived from
//! `(seed, stream tag, index)`, so any step of a run can be replayed without
//! carrying generator state around.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::LatentTensor;

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to mix stream coordinates into one seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: u64, index: u64) -> StreamRng {
    seeded(mix(mix(seed ^ mix(stream)) ^ index))
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_tensor(rng: &mut impl Rng, channels: usize, height: usize, width: usize) -> LatentTensor {
    LatentTensor::new(channels, height, width, normals(rng, channels * height * width))
        .expect("normal draws are finite")
}

/// Stream tags keep independent uses of one seed apart.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const PROMPT: u64 = 4;
    pub const TOY: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const CLASSIFIER: u64 = 7;
    pub const CODEC: u64 = 8;
}
