//! Finite-difference gradient verification.
//!
//! Central differences in `f64` give an independent oracle for every
//! hand-derived backward rule: perturb one entry at a time, re-run the
//! forward function, and compare the slope against the tape's gradient.

use crate::error::Result;

use super::tensor::Tensor;

/// Numerically differentiates a scalar-valued function at `x` by central
/// differences with step `eps`, one entry at a time.
pub fn central_diff<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = x.get(r, c);
            let mut xp = x.clone();
            xp.set(r, c, orig + eps);
            let fp = f(&xp)?;
            let mut xm = x.clone();
            xm.set(r, c, orig - eps);
            let fm = f(&xm)?;
            grad.set(r, c, (fp - fm) / (2.0 * eps));
        }
    }
    Ok(grad)
}

/// Relative error with an absolute floor, so tiny gradients near zero do not
/// produce spurious huge ratios.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error across all entries of two same-shaped tensors.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
