//! Parameter initialization helpers shared by the network modules.

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// Kaiming-uniform weight: U(-bound, bound) with bound = sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let dist = Uniform::new(-bound, bound);
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, vals).with_grad()
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n]).with_grad()
}
