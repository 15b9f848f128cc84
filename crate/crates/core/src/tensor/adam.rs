use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected first and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let first: BTreeMap<_, _> = params
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one Adam update using the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
        if let Some(name) = params.names().find(|n| !params.has_grad(n) || !self.first.contains_key(*n)) {
            return Err(Error::Contract(format!("adam: no gradient or moment slot for {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, value, grad) in params.grads_mut() {
            let m = self.first.get_mut(name).expect("checked above");
            let v = self.second.get_mut(name).expect("checked above");
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
