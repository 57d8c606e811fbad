use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XfiError};
use crate::tensor::ParameterStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

/// Optimization and sampling settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// SGD step decay: multiply the rate by `lr_gamma` every `lr_step` steps (0 disables).
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Sampling and shuffling seed; set by the caller, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 2000,
            optimizer: OptimizerKind::Adamw,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            momentum: 0.9,
            lr_step: 0,
            lr_gamma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(XfiError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(XfiError::Config("batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(XfiError::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(XfiError::Config("eps must be > 0, weight_decay ≥ 0, momentum in [0, 1)".into()));
        }
        if !(self.lr_gamma > 0.0) {
            return Err(XfiError::Config("lr_gamma must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at zero-based `step`.
    pub fn rate_at(&self, step: usize) -> f64 {
        match (self.optimizer, self.lr_step) {
            (OptimizerKind::Sgd, s) if s > 0 => self.learning_rate * self.lr_gamma.powi((step / s) as i32),
            _ => self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter moment estimates and the update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    moments: BTreeMap<String, Moments>,
    t: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    fn slot(&mut self, name: &str, len: usize) -> &mut Moments {
        self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![0.0; len],
            second: vec![0.0; len],
        })
    }
}

fn grads_of<'a>(params: &'a ParameterStore, name: &str) -> Result<&'a [f64]> {
    let g = params
        .get(name)?
        .grad()
        .ok_or_else(|| XfiError::Precondition(format!("parameter `{name}` has no gradient")))?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(XfiError::NonFinite {
            op: format!("gradient of `{name}`"),
        });
    }
    Ok(g)
}

/// One AdamW update of the named parameters with decoupled weight decay applied to the
/// pre-update values.
pub fn adamw_step<'a, I>(params: &mut ParameterStore, names: I, state: &mut OptimState, cfg: &TrainConfig, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let names: Vec<&str> = names.into_iter().collect();
    for &name in &names {
        grads_of(params, name)?;
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for name in names {
        let g = grads_of(params, name)?.to_vec();
        let slot = state.slot(name, g.len());
        let theta = params.get_mut(name)?.data_mut();
        for (i, gi) in g.into_iter().enumerate() {
            slot.first[i] = b1 * slot.first[i] + (1.0 - b1) * gi;
            slot.second[i] = b2 * slot.second[i] + (1.0 - b2) * gi * gi;
            let m_hat = slot.first[i] / c1;
            let v_hat = slot.second[i] / c2;
            let old = theta[i];
            theta[i] = old - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * old;
        }
    }
    Ok(())
}

/// One SGD update with momentum and L2 weight decay.
pub fn sgd_step<'a, I>(params: &mut ParameterStore, names: I, state: &mut OptimState, cfg: &TrainConfig, lr: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a str>,
{
    let names: Vec<&str> = names.into_iter().collect();
    for &name in &names {
        grads_of(params, name)?;
    }
    state.t += 1;
    for name in names {
        let g = grads_of(params, name)?.to_vec();
        let slot = state.slot(name, g.len());
        let theta = params.get_mut(name)?.data_mut();
        for (i, gi) in g.into_iter().enumerate() {
            let d = gi + cfg.weight_decay * theta[i];
            slot.first[i] = cfg.momentum * slot.first[i] + d;
            theta[i] -= lr * slot.first[i];
        }
    }
    Ok(())
}
