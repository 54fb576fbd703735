use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A NaN anywhere in `grads` aborts before any state changes.
    pub fn step(&mut self, params: &mut [f64], grads: &Gradients) -> Result<()> {
        let g = &grads.values;
        if params.len() != self.m.len() || g.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                g.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| v.is_nan()) {
            let slot = grads.layout.iter().find(|s| i >= s.offset && i < s.offset + s.len);
            return Err(Error::NanGradient {
                param: slot.map_or_else(|| "<unnamed>".to_string(), |s| s.name.clone()),
                index: slot.map_or(i, |s| i - s.offset),
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
