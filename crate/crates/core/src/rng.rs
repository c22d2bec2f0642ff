//! Seed derivation and sampling helpers.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded by a
//! 64-bit value. Substream seeds are derived by hashing a parent seed with a
//! sequence of integer labels (for example `(run_seed, epoch, group, sample)`),
//! so parallel rollouts never need to coordinate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `parent` and an ordered list of labels.
pub fn derive_seed(parent: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(parent), |acc, &label| mix64(acc ^ mix64(label)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| standard_normal(rng)).collect()
}

/// Stream labels used when deriving seeds, so unrelated consumers of the
/// same parent seed never collide.
pub mod stream {
    pub const ROLLOUT: u64 = 1;
    pub const PROMPT_NOISE: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const EPOCH: u64 = 5;
    pub const ENCODER: u64 = 6;
}
