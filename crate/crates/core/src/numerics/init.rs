//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::Tensor;

/// I.i.d. normal entries with standard deviation `std`.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor> {
    let numel = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Glorot-uniform matrix for a `fan_in × fan_out` linear map.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new([fan_in, fan_out], data)
}
