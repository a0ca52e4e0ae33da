//! Ancestral and pseudo-linear-multistep reverse updates.
//!
//! Both samplers share the closed-form clean-latent prediction, so a
//! single-step run produces identical output from either.

use crate::error::{Result, SdgError};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Plms,
    Ddpm,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Option<SamplerKind> {
        match s {
            "plms" => Some(SamplerKind::Plms),
            "ddpm" => Some(SamplerKind::Ddpm),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::Plms => "plms",
            SamplerKind::Ddpm => "ddpm",
        }
    }
}

/// `x0 = (z - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`, elementwise.
pub fn predict_x0<S: Scalar>(z: &[S], eps: &[S], alpha_bar_t: S) -> Vec<S> {
    let sqrt_ab = alpha_bar_t.sqrt();
    let sqrt_1mab = (S::one() - alpha_bar_t).sqrt();
    z.iter()
        .zip(eps.iter())
        .map(|(&zt, &e)| (zt - sqrt_1mab * e) / sqrt_ab)
        .collect()
}

/// Deterministic transfer from `t` to `t_prev` under the epsilon
/// parameterization.
pub fn ddim_transfer<S: Scalar>(
    z: &[S],
    eps: &[S],
    schedule: &NoiseSchedule<S>,
    t: usize,
    t_prev: usize,
) -> Vec<S> {
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t_prev);
    let x0 = predict_x0(z, eps, abar_t);
    let sqrt_ap = abar_prev.sqrt();
    let sqrt_1map = (S::one() - abar_prev).sqrt();
    x0.iter()
        .zip(eps.iter())
        .map(|(&x, &e)| sqrt_ap * x + sqrt_1map * e)
        .collect()
}

/// One ancestral update. `noise` must have the latent's length for `t > 1`
/// and is ignored at the final step.
pub fn ddpm_step<S: Scalar>(
    z: &[S],
    eps: &[S],
    schedule: &NoiseSchedule<S>,
    t: usize,
    noise: &[S],
) -> Vec<S> {
    assert!(t >= 1 && t <= schedule.steps());
    if t == 1 {
        return predict_x0(z, eps, schedule.alpha_bar(1));
    }
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let coef = beta / (S::one() - abar_t).sqrt();
    let inv_sqrt_alpha = S::one() / alpha.sqrt();
    let var = (S::one() - abar_prev) / (S::one() - abar_t) * beta;
    let sigma = var.sqrt();
    z.iter()
        .zip(eps.iter())
        .zip(noise.iter())
        .map(|((&zt, &e), &n)| inv_sqrt_alpha * (zt - coef * e) + sigma * n)
        .collect()
}

/// Linear multistep combination of the noise-estimate history. With fewer
/// than the full four terms the lower-order coefficients are used, so an
/// underfilled history never errors.
pub fn plms_combine_eps<S: Scalar>(history: &[Vec<S>], current: &[S]) -> Vec<S> {
    match history.len() {
        0 => current.to_vec(),
        1 => {
            let e1 = &history[history.len() - 1];
            current
                .iter()
                .zip(e1.iter())
                .map(|(&e, &h1)| (S::of(3.0) * e - h1) / S::of(2.0))
                .collect()
        }
        2 => {
            let e1 = &history[history.len() - 1];
            let e2 = &history[history.len() - 2];
            current
                .iter()
                .zip(e1.iter())
                .zip(e2.iter())
                .map(|((&e, &h1), &h2)| {
                    (S::of(23.0) * e - S::of(16.0) * h1 + S::of(5.0) * h2) / S::of(12.0)
                })
                .collect()
        }
        _ => {
            let e1 = &history[history.len() - 1];
            let e2 = &history[history.len() - 2];
            let e3 = &history[history.len() - 3];
            current
                .iter()
                .zip(e1.iter())
                .zip(e2.iter())
                .zip(e3.iter())
                .map(|(((&e, &h1), &h2), &h3)| {
                    (S::of(55.0) * e - S::of(59.0) * h1 + S::of(37.0) * h2
                        - S::of(9.0) * h3)
                        / S::of(24.0)
                })
                .collect()
        }
    }
}

/// Multistep sampler state: the retained noise-estimate history.
#[derive(Debug, Clone, Default)]
pub struct PlmsState<S> {
    old_eps: Vec<Vec<S>>,
}

impl<S: Scalar> PlmsState<S> {
    pub fn new() -> Self {
        PlmsState { old_eps: Vec::new() }
    }

    /// One multistep update from `t` to `t - 1`. On the very first step the
    /// history is empty and a pseudo improved-Euler step is taken, which
    /// needs one extra model evaluation via `eps_fn`; the final step of a
    /// single-step schedule degrades to the plain first-order transfer.
    pub fn step<F>(
        &mut self,
        z: &[S],
        eps: &[S],
        schedule: &NoiseSchedule<S>,
        t: usize,
        mut eps_fn: F,
    ) -> Result<Vec<S>>
    where
        F: FnMut(&[S], usize) -> Result<Vec<S>>,
    {
        if t < 1 || t > schedule.steps() {
            return Err(SdgError::Config(format!("timestep {t} out of range")));
        }
        let eps_prime = if self.old_eps.is_empty() && t > 1 {
            // Warm start: evaluate at the provisional next state and average.
            let z_mid = ddim_transfer(z, eps, schedule, t, t - 1);
            let eps_next = eps_fn(&z_mid, t - 1)?;
            eps.iter()
                .zip(eps_next.iter())
                .map(|(&a, &b)| (a + b) / S::of(2.0))
                .collect()
        } else {
            plms_combine_eps(&self.old_eps, eps)
        };
        self.old_eps.push(eps.to_vec());
        if self.old_eps.len() > 3 {
            self.old_eps.remove(0);
        }
        Ok(ddim_transfer(z, &eps_prime, schedule, t, t - 1))
    }
}
