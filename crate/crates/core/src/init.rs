//! Seeded parameter initialization.
//!
//! Each parameter draws from its own ChaCha stream keyed on
//! `(seed, name)`, so a parameter's initial value does not depend on which
//! other modules were built or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// He-normal: zero mean, variance `2 / fan_in`.
pub fn he_normal(seed: u64, name: &str, shape: Shape) -> Tensor {
    let [_, cin_g, kh, kw] = shape.0;
    let fan_in = (cin_g * kh * kw).max(1) as f32;
    let dist = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
    let mut rng = rng_for(seed, name);
    let data = (0..shape.numel()).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub fn conv(store: &mut WeightStore, seed: u64, prefix: &str, shape: Shape, bias: bool) {
    let name = format!("{prefix}.weight");
    let w = he_normal(seed, &name, shape);
    store.insert(name, w);
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::vector(vec![0.0; shape.n()]));
    }
}

pub fn batchnorm(store: &mut WeightStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::vector(vec![1.0; c]));
    store.insert(format!("{prefix}.beta"), Tensor::vector(vec![0.0; c]));
    store.insert(format!("{prefix}.running_mean"), Tensor::vector(vec![0.0; c]));
    store.insert(format!("{prefix}.running_var"), Tensor::vector(vec![1.0; c]));
}

/// Standard-normal tensor, for tests and synthetic inputs.
pub fn randn(seed: u64, name: &str, shape: Shape) -> Tensor {
    let dist = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut rng = rng_for(seed, name);
    let data = (0..shape.numel()).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
