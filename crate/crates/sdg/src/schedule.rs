//! Forward-process noise schedule.

use crate::error::{Result, SdgError};
use crate::scalar::Scalar;

/// Per-step betas with the derived alphas and cumulative alpha products.
/// Timestep indices are 1-based; `alpha_bar(0)` is one.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<S> {
    betas: Vec<S>,
    alphas: Vec<S>,
    alpha_bars: Vec<S>,
}

/// Linearly spaced betas from `start` to `end` inclusive.
pub fn linear_betas<S: Scalar>(steps: usize, start: f64, end: f64) -> Vec<S> {
    assert!(steps >= 1);
    if steps == 1 {
        return vec![S::of(start)];
    }
    (0..steps)
        .map(|i| S::of(start + (end - start) * i as f64 / (steps - 1) as f64))
        .collect()
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn new(betas: Vec<S>) -> Result<Self> {
        if betas.is_empty() {
            return Err(SdgError::Config("schedule needs at least one step".into()));
        }
        for w in betas.windows(2) {
            if w[1] < w[0] {
                return Err(SdgError::Config("betas must be non-decreasing".into()));
            }
        }
        if betas.iter().any(|&b| b <= S::zero() || b >= S::one()) {
            return Err(SdgError::Config("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<S> = betas.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = S::one();
        for &a in &alphas {
            prod = prod * a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        Self::new(linear_betas(steps, start, end))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t`, `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> S {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }
}
