//! Adam optimizer with bias correction.
//!
//! One [`AdamState`] owns the first/second moment buffers for a single
//! parameter tensor. Model-level optimizers hold one state per named
//! parameter and apply updates after each backward pass.

use crate::error::{Result, SanmError};
use crate::numerics::tensor::NdTensor;

/// Per-parameter Adam state.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Standard hyperparameters (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn new(lr: f64, numel: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }

    pub fn with_betas(lr: f64, numel: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Change the learning rate mid-run (staged schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one bias-corrected update to `param` in place.
    pub fn step(&mut self, param: &mut NdTensor, grad: &NdTensor) -> Result<()> {
        if param.numel() != self.m.len() || grad.numel() != self.m.len() {
            return Err(SanmError::Shape(format!(
                "adam state sized for {} values, got param {} / grad {}",
                self.m.len(),
                param.numel(),
                grad.numel()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let g = grad.data().to_vec();
        let p = param.data_mut();
        for j in 0..g.len() {
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g[j];
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g[j] * g[j];
            let m_hat = self.m[j] / c1;
            let v_hat = self.v[j] / c2;
            p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
