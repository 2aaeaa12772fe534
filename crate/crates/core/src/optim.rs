//! Adam and parameter exponential moving average.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, step_count: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    ///
    /// If any gradient is non-finite nothing is modified (gradients
    /// included) and the offending parameter is named in the error.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != params.len() {
            bail!(Shape, "optimizer tracks {} parameters, store has {}", self.first_moment.len(), params.len());
        }
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.to_string()));
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step_count as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step_count as f64);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            let grads = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (lr * m_hat / (libm::sqrt(v_hat) + eps)) as f32;
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub rate: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    /// Start the shadow at the current parameter values.
    pub fn new(rate: f64, params: &ParamStore) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            bail!(Config, "EMA rate must lie in (0, 1), got {}", rate);
        }
        Ok(Self { rate, shadow: params.values() })
    }

    /// `shadow ← rate · shadow + (1 − rate) · param`, evaluated as
    /// `shadow + (1 − rate)(param − shadow)` so each new shadow value lies
    /// between the old one and the parameter.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if self.shadow.len() != params.len() {
            bail!(Shape, "EMA tracks {} parameters, store has {}", self.shadow.len(), params.len());
        }
        let w = 1.0 - self.rate;
        for (s, p) in self.shadow.iter_mut().zip(params.iter()) {
            s.check_same_shape(&p.value, "EMA shadow")?;
            for (s, &v) in s.data_mut().iter_mut().zip(p.value.data()) {
                let prev = *s as f64;
                *s = (prev + w * (v as f64 - prev)) as f32;
            }
        }
        Ok(())
    }
}
