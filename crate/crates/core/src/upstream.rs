//! Upstream learning: parameter-efficient first-order MAML and multi-task
//! training over element partitions.
//!
//! Both trainers operate on an [`ElementSet`] partition of the parameter
//! store: MAML adapts the inner set (the elements that will be tunable
//! downstream) per task with SGD, then updates the outer set with AdamW from
//! post-adaptation query losses, taking the first-order approximation —
//! gradients are evaluated at the adapted values with no differentiation
//! through the inner updates. Multi-task training pools every task's train
//! split and runs plain AdamW on the outer set, leaving attached-but-frozen
//! elements untouched.
//!
//! Learning rates are per element kind ([`KindRates`]); the defaults are the
//! published full-scale values, and desk-scale runs override them from
//! config files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elements::{ElementKind, ElementSet};
use crate::error::{ensure_contract, ensure_input, Result};
use crate::optim::{adamw_step, sgd_step, AdamWState, OptimizerConfig};
use crate::params::ParamStore;
use crate::tasks::TaskDataset;

/// Anything trainable by the upstream stage: owns a parameter store and can
/// compute a batch loss while accumulating gradients for a chosen element
/// set.
pub trait TrainableModel {
    fn param_store(&self) -> &ParamStore;
    fn param_store_mut(&mut self) -> &mut ParamStore;
    /// Accumulates gradients for parameters whose kind is in `trainable`
    /// (without clearing existing ones) and returns the batch loss.
    fn loss_and_backward(&mut self, batch: &[(String, String)], trainable: &ElementSet) -> Result<f64>;
}

impl TrainableModel for crate::model::Seq2SeqModel {
    fn param_store(&self) -> &ParamStore {
        self.store()
    }

    fn param_store_mut(&mut self) -> &mut ParamStore {
        self.store_mut()
    }

    fn loss_and_backward(&mut self, batch: &[(String, String)], trainable: &ElementSet) -> Result<f64> {
        self.loss_backward(batch, trainable)
    }
}

/// One learning rate per element kind. Meta elements default to the same
/// rate as their base kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindRates {
    pub plm: f64,
    pub meta_adapter: f64,
    pub meta_prompt: f64,
    pub adapter: f64,
    pub prompt: f64,
}

impl KindRates {
    pub fn rate(&self, kind: ElementKind) -> f64 {
        match kind {
            ElementKind::Plm => self.plm,
            ElementKind::MetaAdapter => self.meta_adapter,
            ElementKind::MetaPrompt => self.meta_prompt,
            ElementKind::Adapter => self.adapter,
            ElementKind::Prompt => self.prompt,
        }
    }

    /// Published outer-loop rates (model 8e-5, prompt 8e-3, adapter 1e-5).
    pub fn outer_default() -> Self {
        KindRates {
            plm: 8e-5,
            meta_adapter: 1e-5,
            meta_prompt: 8e-3,
            adapter: 1e-5,
            prompt: 8e-3,
        }
    }

    /// Published inner-loop rates (prompt 0.025, adapter 0.001); the PLM is
    /// never inner-tuned, so its slot reuses the outer rate.
    pub fn inner_default() -> Self {
        KindRates {
            plm: 8e-5,
            meta_adapter: 0.001,
            meta_prompt: 0.025,
            adapter: 0.001,
            prompt: 0.025,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("plm", self.plm),
            ("meta_adapter", self.meta_adapter),
            ("meta_prompt", self.meta_prompt),
            ("adapter", self.adapter),
            ("prompt", self.prompt),
        ] {
            ensure_contract!(v > 0.0 && v.is_finite(), "learning rate {name} must be positive, got {v}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MamlConfig {
    pub outer_lr: KindRates,
    pub inner_lr: KindRates,
    pub inner_steps: usize,
    /// K: support examples drawn from the task's train split per outer step.
    pub support_size: usize,
    /// Query examples drawn from the task's dev split for the outer loss.
    pub query_size: usize,
    pub epochs: usize,
    pub task_batch: usize,
    pub weight_decay: f64,
    pub first_order: bool,
    pub seed: u64,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            outer_lr: KindRates::outer_default(),
            inner_lr: KindRates::inner_default(),
            inner_steps: 4,
            support_size: 8,
            query_size: 16,
            epochs: 80,
            task_batch: 1,
            weight_decay: 0.01,
            first_order: true,
            seed: 0,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        self.outer_lr.validate()?;
        self.inner_lr.validate()?;
        ensure_contract!(self.inner_steps >= 1, "inner_steps must be >= 1");
        ensure_contract!(self.support_size >= 1, "support_size must be >= 1");
        ensure_contract!(self.query_size >= 1, "query_size must be >= 1");
        ensure_contract!(self.task_batch >= 1, "task_batch must be >= 1");
        ensure_contract!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        ensure_contract!(self.first_order, "second-order MAML is not supported");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultitaskConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        MultitaskConfig { lr: 3e-5, epochs: 10, batch_size: 32, weight_decay: 0.01, seed: 0 }
    }
}

impl MultitaskConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        ensure_contract!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure_contract!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        Ok(())
    }
}

/// One training-log line: outer step index, task identifier, final
/// inner-loop loss (absent for multi-task) and the outer/batch loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub task: String,
    pub inner_loss: Option<f64>,
    pub outer_loss: f64,
}

/// Writes records as line-delimited JSON.
pub fn write_train_log(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut body = String::new();
    for rec in records {
        body.push_str(&serde_json::to_string(rec)?);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Per-kind AdamW states for the outer optimizer (moments are per parameter,
/// but learning rates differ per kind, so each kind gets its own config).
pub type OuterOptState = HashMap<ElementKind, AdamWState>;

fn sample_pairs(
    rng: &mut ChaCha8Rng,
    data: &[(String, String)],
    k: usize,
) -> Vec<(String, String)> {
    index::sample(rng, data.len(), k).iter().map(|i| data[i].clone()).collect()
}

/// Per-kind SGD over the inner (downstream-tunable) set.
fn inner_sgd_step<M: TrainableModel>(model: &mut M, inner: &ElementSet, rates: &KindRates) -> Result<()> {
    for kind in inner.iter() {
        let names = model.param_store().names_in(&ElementSet::from_kinds(&[kind]));
        let cfg = OptimizerConfig::sgd(rates.rate(kind));
        sgd_step(model.param_store_mut(), &names, &cfg)?;
    }
    Ok(())
}

/// Per-kind AdamW over the outer set using accumulated gradients already in
/// the store.
fn outer_adamw_step<M: TrainableModel>(
    model: &mut M,
    upstream: &ElementSet,
    cfg: &MamlConfig,
    states: &mut OuterOptState,
) -> Result<()> {
    for kind in upstream.iter() {
        let names = model.param_store().names_in(&ElementSet::from_kinds(&[kind]));
        let opt = OptimizerConfig::adamw(cfg.outer_lr.rate(kind)).with_weight_decay(cfg.weight_decay);
        let state = states.entry(kind).or_default();
        adamw_step(model.param_store_mut(), &names, &opt, state)?;
    }
    Ok(())
}

/// Diagnostics from one outer step: `(task_name, final_inner_loss,
/// query_loss)` per task in the batch.
pub type OuterStepDiagnostics = Vec<(String, f64, f64)>;

/// One parameter-efficient first-order MAML outer step over a task batch.
///
/// Per task: snapshot the inner set, adapt it with `inner_steps` SGD steps
/// on a sampled support batch, take the query loss and harvest outer-set
/// gradients at the adapted values, then restore the inner set. Outer
/// gradients sum over the task batch; a single per-kind AdamW step applies
/// them. The base model's inner set ends the step exactly as it began.
pub fn maml_outer_step<M: TrainableModel>(
    model: &mut M,
    tasks_batch: &[&TaskDataset],
    upstream: &ElementSet,
    downstream: &ElementSet,
    cfg: &MamlConfig,
    states: &mut OuterOptState,
    rng: &mut ChaCha8Rng,
) -> Result<OuterStepDiagnostics> {
    cfg.validate()?;
    ensure_contract!(!tasks_batch.is_empty(), "empty task batch");
    ensure_contract!(
        downstream.is_subset_of(&ElementSet::downstream_allowed()),
        "inner-loop set {downstream} contains elements that are never downstream-tunable"
    );
    crate::elements::partition_parameters(model.param_store(), upstream)?;
    crate::elements::partition_parameters(model.param_store(), downstream)?;

    let mut outer_grads: HashMap<String, Vec<f64>> = HashMap::new();
    let upstream_names = model.param_store().names_in(upstream);
    let mut diagnostics = Vec::with_capacity(tasks_batch.len());

    for task in tasks_batch {
        ensure_input!(
            task.train.len() >= cfg.support_size,
            "task {:?} has {} train examples, need K = {}",
            task.name,
            task.train.len(),
            cfg.support_size
        );
        ensure_input!(
            task.dev.len() >= cfg.query_size,
            "task {:?} has {} dev examples, need query_size = {}",
            task.name,
            task.dev.len(),
            cfg.query_size
        );
        let support = sample_pairs(rng, &task.train, cfg.support_size);
        let query = sample_pairs(rng, &task.dev, cfg.query_size);

        // inner adaptation on a value snapshot of the inner set
        let snapshot = model.param_store().snapshot(downstream);
        let mut inner_loss = 0.0;
        for _ in 0..cfg.inner_steps {
            model.param_store_mut().clear_grads();
            inner_loss = model.loss_and_backward(&support, downstream)?;
            inner_sgd_step(model, downstream, &cfg.inner_lr)?;
        }

        // query loss at the adapted parameters; gradients w.r.t. the outer set
        model.param_store_mut().clear_grads();
        let outer_loss = model.loss_and_backward(&query, upstream)?;
        for name in &upstream_names {
            let grad = model
                .param_store()
                .get(name)
                .expect("outer parameter vanished")
                .value
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| {
                    vec![0.0; model.param_store().get(name).unwrap().value.data().len()]
                });
            match outer_grads.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                None => {
                    outer_grads.insert(name.clone(), grad);
                }
            }
        }

        // discard the per-task adaptation
        model.param_store_mut().restore(&snapshot)?;
        diagnostics.push((task.name.clone(), inner_loss, outer_loss));
    }

    // apply the summed outer gradient
    model.param_store_mut().clear_grads();
    for (name, grad) in &outer_grads {
        model
            .param_store_mut()
            .get_mut(name)
            .expect("outer parameter vanished")
            .value
            .accumulate_grad(grad)?;
    }
    outer_adamw_step(model, upstream, cfg, states)?;
    model.param_store_mut().clear_grads();
    Ok(diagnostics)
}

/// Full MAML run: `epochs` passes over `tasks` in shuffled order, task
/// batches of `cfg.task_batch`. Returns the training log.
pub fn maml_train<M: TrainableModel>(
    model: &mut M,
    tasks: &[TaskDataset],
    upstream: &ElementSet,
    downstream: &ElementSet,
    cfg: &MamlConfig,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    ensure_input!(!tasks.is_empty(), "no training tasks");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states = OuterOptState::new();
    let mut records = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.task_batch) {
            let batch: Vec<&TaskDataset> = chunk.iter().map(|&i| &tasks[i]).collect();
            let diags = maml_outer_step(model, &batch, upstream, downstream, cfg, &mut states, &mut rng)?;
            step += 1;
            for (task, inner, outer) in diags {
                records.push(TrainRecord { step, task, inner_loss: Some(inner), outer_loss: outer });
            }
        }
    }
    Ok(records)
}

/// Multi-task upstream training: pools every task's train split, shuffles
/// each epoch, and runs AdamW on the outer set only. Attached elements
/// outside `upstream` stay frozen.
pub fn multitask_train<M: TrainableModel>(
    model: &mut M,
    tasks: &[TaskDataset],
    upstream: &ElementSet,
    cfg: &MultitaskConfig,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    ensure_input!(!tasks.is_empty(), "no training tasks");
    crate::elements::partition_parameters(model.param_store(), upstream)?;

    let mut pool: Vec<(String, String)> =
        tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    ensure_input!(!pool.is_empty(), "training tasks contain no examples");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states = OuterOptState::new();
    let mut records = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        for batch in pool.chunks(cfg.batch_size) {
            model.param_store_mut().clear_grads();
            let loss = model.loss_and_backward(batch, upstream)?;
            for kind in upstream.iter() {
                let kind_names: Vec<String> = {
                    let set = ElementSet::from_kinds(&[kind]);
                    model.param_store().names_in(&set)
                };
                let opt = OptimizerConfig::adamw(cfg.lr).with_weight_decay(cfg.weight_decay);
                let state = states.entry(kind).or_default();
                adamw_step(model.param_store_mut(), &kind_names, &opt, state)?;
            }
            step += 1;
            records.push(TrainRecord {
                step,
                task: "multitask".to_string(),
                inner_loss: None,
                outer_loss: loss,
            });
        }
    }
    model.param_store_mut().clear_grads();
    Ok(records)
}
