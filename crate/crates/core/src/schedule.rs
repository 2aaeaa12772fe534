//! Diffusion coefficient tables.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Canonical endpoints for a 1000-step linear schedule.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_TIMESTEPS: usize = 1000;

/// The three numbers a schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// Default endpoints rescaled by `1000 / T` (clamped below 0.999), so
    /// short desk-scale chains still reach near-pure noise at `t = T`.
    pub fn scaled_default(timesteps: usize) -> Self {
        let scale = DEFAULT_TIMESTEPS as f64 / timesteps.max(1) as f64;
        Self {
            timesteps,
            beta_start: (DEFAULT_BETA_START * scale).min(0.999),
            beta_end: (DEFAULT_BETA_END * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::scaled_default(DEFAULT_TIMESTEPS)
    }
}

/// Precomputed `β_t`, `α_t = 1 − β_t`, `ᾱ_t = ∏_{s≤t} α_s` and `σ_t = √β_t`
/// for `t = 1..=T`. Accessors take the 1-based step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            bail!(Config, "schedule needs at least one timestep");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            bail!(Config, "need 0 < beta_start <= beta_end < 1, got {} and {}", beta_start, beta_end);
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else if i == timesteps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|&b| libm::sqrt(b)).collect();
        Ok(Self { params: ScheduleParams { timesteps, beta_start, beta_end }, beta, alpha, alpha_bar, sigma })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            bail!(Domain, "timestep {} outside 1..={}", t, self.timesteps());
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}
