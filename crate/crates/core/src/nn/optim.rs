//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the cosine decays to `min_ratio`.
    pub horizon: u64,
    pub min_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            horizon: 1000,
            min_ratio: 0.005,
        }
    }
}

/// Multiplier on the base rate: 1 at step 0, `min_ratio` at and after `horizon`.
pub fn cosine_multiplier(step: u64, horizon: u64, min_ratio: f64) -> f64 {
    let frac = if horizon == 0 {
        1.0
    } else {
        (step.min(horizon) as f64) / horizon as f64
    };
    min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Optimizer state: step count and per-parameter moments in sorted-name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.min_ratio > 0.0 && config.min_ratio <= 1.0) {
            return Err(Error::Invalid(format!(
                "learning rate {} / floor ratio {} out of range",
                config.lr, config.min_ratio
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        Ok(Self {
            config,
            step: 0,
            names: ids.iter().map(|&id| store.name(id).to_string()).collect(),
            m: ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect(),
            v: ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * cosine_multiplier(self.step, self.config.horizon, self.config.min_ratio)
    }

    /// Apply one update to every parameter, then clear the gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.names.len() {
            return Err(Error::Invalid("optimizer state does not match parameter set".into()));
        }
        for (&id, name) in ids.iter().zip(&self.names) {
            if store.name(id) != name {
                return Err(Error::UnknownParam(store.name(id).to_string()));
            }
            match store.grad(id) {
                None => return Err(Error::MissingGrad(name.clone())),
                Some(g) if g.iter().any(|x| !x.is_finite()) => return Err(Error::NonFiniteGrad(name.clone())),
                Some(_) => {}
            }
        }
        let c = &self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (slot, &id) in ids.iter().enumerate() {
            let g = store.grad(id).expect("checked above").to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        store.clear_grads();
        self.step += 1;
        if !store.all_finite() {
            return Err(Error::Divergence {
                step: self.step,
                component: "parameters".into(),
            });
        }
        Ok(())
    }
}
