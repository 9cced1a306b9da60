use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v as f32;
        }
    })
}
