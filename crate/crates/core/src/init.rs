//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Real, Tensor};

/// Entries drawn from `uniform(-limit, limit)`.
pub fn uniform<F: Real, R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Tensor<F> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..rows * cols).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches")
}

/// Glorot/Xavier uniform for a `fan_in x fan_out` weight matrix.
pub fn xavier<F: Real, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(fan_in, fan_out, limit, rng)
}
