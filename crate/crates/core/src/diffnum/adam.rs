//! Adam optimizer and the stepwise learning-rate decay schedule.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Per-parameter first/second moment estimates. Parameters are addressed by
/// index; callers must use a stable enumeration order across steps.
pub struct AdamState<S: Scalar> {
    t: u64,
    beta1: S,
    beta2: S,
    eps: S,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Standard defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            t: 0,
            beta1: S::from(0.9).unwrap(),
            beta2: S::from(0.999).unwrap(),
            eps: S::from(1e-8).unwrap(),
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    /// Advances the shared step counter. Call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to parameter `idx` in place.
    pub fn update(
        &mut self,
        idx: usize,
        lr: S,
        param: &mut Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Grad("adam update before begin_step".into()));
        }
        if idx >= self.m.len() {
            return Err(Error::Grad(format!(
                "adam parameter index {idx} out of range ({} registered)",
                self.m.len()
            )));
        }
        if self.m[idx].shape() != param.shape() || param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "adam update {idx}: state {:?}, param {:?}, grad {:?}",
                self.m[idx].shape(),
                param.shape(),
                grad.shape()
            )));
        }
        let one = S::one();
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = one - b1.powi(self.t as i32);
        let bias2 = one - b2.powi(self.t as i32);
        let m = self.m[idx].as_mut_slice();
        let v = self.v[idx].as_mut_slice();
        let p = param.as_mut_slice();
        let g = grad.as_slice();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if !param.is_finite() {
            return Err(Error::NonFinite(format!(
                "adam produced a non-finite parameter at index {idx}"
            )));
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Stepwise decay: `base * decay^floor(epoch / interval)`, with epochs
/// counted from zero. An interval of zero disables decay.
pub fn lr_schedule<S: Scalar>(base: S, decay: S, interval: usize, epoch: usize) -> S {
    if interval == 0 {
        return base;
    }
    base * decay.powi((epoch / interval) as i32)
}
