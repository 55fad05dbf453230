//! Weight initialization.

use rand::Rng;

use super::tensor::{Scalar, Tensor};

/// Uniform fan-in initialization: entries drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` where `fan_in` is the row count,
/// matching the `x · W` layout used throughout (rows = input features).
///
/// Values are sampled in `f64` and converted, so a given seed produces the
/// same weights up to rounding regardless of the scalar type.
pub fn uniform_fan_in<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from(rng.gen_range(-limit..limit)).unwrap())
        .collect();
    Tensor::new(rows, cols, data).expect("positive dimensions")
}
