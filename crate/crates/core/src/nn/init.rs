//! Weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::tensor::Tensor;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix of shape (fan_in x fan_out).
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("length matches by construction")
}

/// Row vector of zeros, the default for biases.
pub fn zero_bias(len: usize) -> Tensor {
    Tensor::zeros(&[1, len])
}

/// Embedding table of shape (rows x dim) with the same fan-in rule; the
/// fan-in of a lookup is the embedding width.
pub fn embedding_table(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor {
    let bound = 1.0 / (dim.max(1) as f64).sqrt();
    let data: Vec<f64> = (0..rows * dim)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, dim], data).expect("length matches by construction")
}
