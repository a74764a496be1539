//! Deterministic, name-keyed parameter initialization.
//!
//! Every tensor draws from a stream keyed by `(seed, tensor name)`, so two
//! models that share a tensor name get bit-identical values for it no matter
//! what else they contain or in what order they were built. This is what
//! makes a scaling-augmented model start exactly at its plain counterpart.

use crate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tensor name; stable across runs and platforms.
fn fnv1a64(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG stream for one named tensor under one global seed.
pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name))
}

/// Uniform in ±sqrt(1/fan_in), drawn from the name-keyed stream.
pub fn uniform_fan_in(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = rng_for(seed, name);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)).expect("positive extents")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).expect("positive extents")
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(shape).expect("positive extents")
}
