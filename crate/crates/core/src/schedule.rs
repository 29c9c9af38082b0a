//! Noise-level schedule and per-step churn for the stochastic sampler.
//!
//! Sampling runs over a decreasing grid of noise levels built by power-law
//! interpolation between `sigma_max` and `sigma_min`, with a terminal zero
//! appended:
//!
//! ```text
//! t_i = (sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
//! ```
//!
//! for `i = 0..N`, then `t_N = 0`. The churn rule temporarily re-raises the
//! noise level inside a window `[s_tmin, s_tmax]` by a factor
//! `gamma = min(s_churn / N, sqrt(2) - 1)`, which keeps the inflated level
//! `t * (1 + gamma)` below `t * sqrt(2)` so the injected variance
//! `t_hat^2 - t^2` never exceeds `t^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};

/// Power-law noise grid parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        let s = NoiseSchedule {
            sigma_min,
            sigma_max,
            rho,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) {
            return Err(SanmError::Config(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_max > self.sigma_min) {
            return Err(SanmError::Config(format!(
                "sigma_max ({}) must exceed sigma_min ({})",
                self.sigma_max, self.sigma_min
            )));
        }
        if !(self.rho > 0.0) {
            return Err(SanmError::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// The `n`-step grid: `n` strictly decreasing positive levels from
    /// `sigma_max` down to `sigma_min` (both hit exactly), plus a final 0 —
    /// `n + 1` values in total. `n = 1` degenerates to `[sigma_max, 0]`.
    pub fn levels(&self, n: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if n == 0 {
            return Err(SanmError::Config("step count must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(n + 1);
        let inv_rho = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv_rho);
        let lo = self.sigma_min.powf(inv_rho);
        for i in 0..n {
            // Endpoints are pinned exactly; powf round-trips would leave
            // them off by an ulp.
            let t = if i == 0 {
                self.sigma_max
            } else if i == n - 1 {
                self.sigma_min
            } else {
                let frac = i as f64 / (n - 1) as f64;
                (hi + frac * (lo - hi)).powf(self.rho)
            };
            out.push(t);
        }
        out.push(0.0);
        Ok(out)
    }
}

/// Stochastic churn parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChurnParams {
    /// Total churn budget, spread over the run as `s_churn / n`.
    pub s_churn: f64,
    /// Noise levels below this get no churn.
    pub s_tmin: f64,
    /// Noise levels above this get no churn.
    pub s_tmax: f64,
    /// Scale applied to the churn noise draw.
    pub s_noise: f64,
}

impl ChurnParams {
    /// Churn disabled entirely.
    pub fn none() -> Self {
        ChurnParams {
            s_churn: 0.0,
            s_tmin: 0.0,
            s_tmax: f64::INFINITY,
            s_noise: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_churn >= 0.0) {
            return Err(SanmError::Config(format!(
                "s_churn must be non-negative, got {}",
                self.s_churn
            )));
        }
        if !(self.s_tmin >= 0.0 && self.s_tmax >= self.s_tmin) {
            return Err(SanmError::Config(format!(
                "churn window [{}, {}] is invalid",
                self.s_tmin, self.s_tmax
            )));
        }
        if !(self.s_noise > 0.0) {
            return Err(SanmError::Config(format!(
                "s_noise must be positive, got {}",
                self.s_noise
            )));
        }
        Ok(())
    }

    /// Churn factor for noise level `t` in an `n`-step run: zero outside
    /// `[s_tmin, s_tmax]` (inclusive), otherwise `min(s_churn/n, sqrt(2)-1)`.
    pub fn gamma(&self, n: usize, t: f64) -> f64 {
        if self.s_churn <= 0.0 || t < self.s_tmin || t > self.s_tmax {
            return 0.0;
        }
        (self.s_churn / n as f64).min(std::f64::consts::SQRT_2 - 1.0)
    }
}
