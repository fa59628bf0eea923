//! SGD and AdamW over named parameters in a [`ParamStore`].
//!
//! Both optimizers update only the names they are handed — gradient
//! confinement to a tunable subset is enforced here, not by the autodiff
//! layer. AdamW uses decoupled weight decay (decay applied to the value,
//! not folded into the gradient) and skips decay for bias and
//! layer-normalization parameters by default. No gradient clipping.

use std::collections::HashMap;

use crate::error::{ensure_contract, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// Hyperparameters shared by both optimizers. The Adam fields are ignored
/// by SGD; `decay_exclusion` decides which parameter names skip weight
/// decay.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_exclusion: fn(&str) -> bool,
}

/// Bias and layer-norm parameters (`*.bias`, `*.gamma`, `*.beta`) take no
/// weight decay.
pub fn default_decay_exclusion(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_exclusion: default_decay_exclusion,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    pub fn adamw(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.learning_rate > 0.0, "learning rate must be positive");
        ensure_contract!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        ensure_contract!(
            0.0 <= self.beta1 && self.beta1 < 1.0 && 0.0 <= self.beta2 && self.beta2 < 1.0,
            "betas must lie in [0, 1)"
        );
        ensure_contract!(self.epsilon > 0.0, "epsilon must be positive");
        Ok(())
    }
}

/// Plain SGD: `value -= lr * grad` for each named parameter.
pub fn sgd_step(store: &mut ParamStore, names: &[String], cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    for name in names {
        let param = store
            .get_mut(name)
            .ok_or_else(|| crate::error::Error::contract(format!("unknown parameter {name:?}")))?;
        let grad = param
            .value
            .grad()
            .ok_or_else(|| {
                crate::error::Error::contract(format!(
                    "sgd step on {name:?} with no accumulated gradient"
                ))
            })?
            .to_vec();
        let data = param.value.data_mut();
        for (w, g) in data.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
struct AdamWSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First/second moments and step counter per parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    slots: HashMap<String, AdamWSlot>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Step counter for one parameter (0 if never stepped).
    pub fn step_count(&self, name: &str) -> u64 {
        self.slots.get(name).map(|s| s.t).unwrap_or(0)
    }
}

/// One AdamW step over the named parameters: bias-corrected Adam update
/// plus decoupled weight decay `value -= lr * wd * value` for names not
/// excluded by `cfg.decay_exclusion`.
pub fn adamw_step(
    store: &mut ParamStore,
    names: &[String],
    cfg: &OptimizerConfig,
    state: &mut AdamWState,
) -> Result<()> {
    cfg.validate()?;
    for name in names {
        let param = store
            .get_mut(name)
            .ok_or_else(|| crate::error::Error::contract(format!("unknown parameter {name:?}")))?;
        let grad = param
            .value
            .grad()
            .ok_or_else(|| {
                crate::error::Error::contract(format!(
                    "adamw step on {name:?} with no accumulated gradient"
                ))
            })?
            .to_vec();

        let n = grad.len();
        let slot = state.slots.entry(name.clone()).or_insert_with(|| AdamWSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        ensure_contract!(
            slot.m.len() == n,
            "optimizer state for {name:?} has length {}, parameter has {}",
            slot.m.len(),
            n
        );
        slot.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
        let decay = if (cfg.decay_exclusion)(name) {
            0.0
        } else {
            cfg.weight_decay
        };

        let data = param.value.data_mut();
        for i in 0..n {
            // Decoupled decay first, then the bias-corrected Adam update.
            data[i] -= cfg.learning_rate * decay * data[i];
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon));
        }
    }
    Ok(())
}

/// Dispatches on `cfg.kind`.
pub fn optimizer_step(
    store: &mut ParamStore,
    names: &[String],
    cfg: &OptimizerConfig,
    state: &mut AdamWState,
) -> Result<()> {
    match cfg.kind {
        OptimizerKind::Sgd => sgd_step(store, names, cfg),
        OptimizerKind::AdamW => adamw_step(store, names, cfg, state),
    }
}
