//! Adam optimizer with bias correction.

use super::{Param, Scalar};
use crate::error::{Error, Result};

/// Per-parameter first/second moment estimates plus the shared step count.
///
/// The state is created for a fixed parameter list; every call to
/// [`AdamState::step`] must pass the same list in the same order (checked
/// by length and shape).
pub struct AdamState<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step_count: u64,
    moments: Vec<Moments<T>>,
}

struct Moments<T> {
    shape: Vec<usize>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    /// Standard coefficients: `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &[Param<T>], lr: f64) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                let t = p.borrow();
                Moments {
                    shape: t.shape().to_vec(),
                    m: vec![T::zero(); t.numel()],
                    v: vec![T::zero(); t.numel()],
                }
            })
            .collect();
        AdamState {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step_count: 0,
            moments,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64(lr);
    }

    pub fn lr(&self) -> f64 {
        self.lr.as_f64()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients currently accumulated in
    /// `params`, then leave the gradients untouched (callers zero them).
    pub fn step(&mut self, params: &[Param<T>]) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::Invariant(format!(
                "adam state tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (p, mom) in params.iter().zip(self.moments.iter_mut()) {
            let mut tensor = p.borrow_mut();
            if tensor.shape() != mom.shape.as_slice() {
                return Err(Error::Invariant(format!(
                    "adam moment shape {:?} does not match parameter shape {:?}",
                    mom.shape,
                    tensor.shape()
                )));
            }
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Invariant("adam step on parameter without gradient".into()))?
                .to_vec();
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                mom.m[i] = self.beta1 * mom.m[i] + (one - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (one - self.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] = data[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
