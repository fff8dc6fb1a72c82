use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// First and second moment estimates for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    m: Gradients,
    v: Gradients,
    step: u64,
}

impl OptState {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        OptState {
            config,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// Non-finite gradients are rejected before anything is modified.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.congruent_with(params) || !self.m.congruent_with(params) {
            return Err(Error::Shape(
                "gradients, optimizer state and parameters disagree in shape".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient entry".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);

        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };

        for (l, (w, b)) in params.params_mut().enumerate() {
            update(
                w.as_mut_slice(),
                grads.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            update(
                b,
                &grads.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
            );
        }
        Ok(())
    }
}

/// Convenience wrapper over [`OptState::step`].
pub fn adam_step(params: &mut Mlp, grads: &Gradients, state: &mut OptState) -> Result<()> {
    state.step(params, grads)
}
