//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! Code defaults carry the published hyperparameters; scale-adjusted values
//! (like the desk-scale learning rates in `configs/desk.conf`) live in config
//! files only. Every upstream learning rate, epoch count, and batch size is
//! addressable by name, e.g.:
//!
//! ```text
//! # comment
//! model.d_model = 32
//! maml.outer_lr.prompt = 8e-2
//! run.seeds = 0,1,2,3,4
//! ```

use std::path::{Path, PathBuf};

use crate::downstream::DownstreamConfig;
use crate::error::{ensure_input, Error, Result};
use crate::model::ModelConfig;
use crate::tasks::MAX_INPUT_CHARS;
use crate::upstream::{MamlConfig, MultitaskConfig};

/// Prompt lengths the experiment grid supports.
pub const PROMPT_LENGTHS: [usize; 3] = [16, 20, 100];

/// Everything a matrix run needs: model shape, both upstream trainers, the
/// downstream tuner, task-suite construction, and seed/output plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub maml: MamlConfig,
    pub multitask: MultitaskConfig,
    /// Downstream budget shared by every combination; `lr` here is the
    /// full fine-tuning (baseline) rate, see [`RunConfig::downstream_for`].
    pub downstream: DownstreamConfig,
    /// Per-kind downstream learning rates (prompt-only and adapter-only runs).
    pub downstream_lr_prompt: f64,
    pub downstream_lr_adapter: f64,
    /// Task-suite construction: generator seed, instance count, split fractions.
    pub suite_seed: u64,
    pub suite_size: usize,
    pub split_fractions: (f64, f64, f64),
    /// Soft-prompt length; one of [`PROMPT_LENGTHS`].
    pub prompt_len: usize,
    /// Meta-prompt length; `None` mirrors `prompt_len`.
    pub meta_prompt_len: Option<usize>,
    /// Meta-adapter bottleneck width.
    pub bottleneck: usize,
    /// Run seeds; reports are averaged across them. Never empty.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Near-zero-baseline exclusion threshold for relative gain.
    pub baseline_epsilon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            maml: MamlConfig::default(),
            multitask: MultitaskConfig::default(),
            downstream: DownstreamConfig::default(),
            downstream_lr_prompt: 0.025,
            downstream_lr_adapter: 0.001,
            suite_seed: 0,
            suite_size: 36,
            split_fractions: (0.6, 0.1, 0.3),
            prompt_len: 16,
            meta_prompt_len: None,
            bottleneck: 8,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            baseline_epsilon: crate::downstream::BASELINE_EPSILON,
        }
    }
}

impl RunConfig {
    pub fn meta_prompt_len(&self) -> usize {
        self.meta_prompt_len.unwrap_or(self.prompt_len)
    }

    /// The downstream budget with the learning rate appropriate for the
    /// given element selection (`None` = full fine-tuning baseline rate).
    pub fn downstream_for(&self, kind: Option<crate::elements::ElementKind>) -> DownstreamConfig {
        let mut cfg = self.downstream.clone();
        match kind {
            Some(crate::elements::ElementKind::Prompt) => cfg.lr = self.downstream_lr_prompt,
            Some(crate::elements::ElementKind::Adapter) => cfg.lr = self.downstream_lr_adapter,
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.maml.validate()?;
        self.multitask.validate()?;
        ensure_input!(
            PROMPT_LENGTHS.contains(&self.prompt_len),
            "prompt length must be one of {PROMPT_LENGTHS:?}, got {}",
            self.prompt_len
        );
        let meta_len = self.meta_prompt_len();
        ensure_input!(meta_len >= 1, "meta-prompt length must be at least 1");
        // worst case: both prompts attached, longest generated input + EOS/BOS
        let needed = self.prompt_len + meta_len + MAX_INPUT_CHARS + 2;
        ensure_input!(
            self.model.max_seq_len >= needed,
            "model.max_seq_len = {} cannot fit prompt {} + meta-prompt {} + input \
             (need at least {needed})",
            self.model.max_seq_len,
            self.prompt_len,
            meta_len
        );
        ensure_input!(!self.seeds.is_empty(), "run.seeds must list at least one seed");
        ensure_input!(self.suite_size >= 1, "suite.size must be at least 1");
        let (a, b, c) = self.split_fractions;
        ensure_input!(
            a >= 0.0 && b >= 0.0 && c >= 0.0 && ((a + b + c) - 1.0).abs() < 1e-9,
            "suite split fractions must be non-negative and sum to 1"
        );
        ensure_input!(self.bottleneck >= 1, "elements.bottleneck must be at least 1");
        ensure_input!(
            self.downstream_lr_prompt > 0.0 && self.downstream_lr_adapter > 0.0,
            "downstream learning rates must be positive"
        );
        ensure_input!(self.baseline_epsilon > 0.0, "run.epsilon must be positive");
        self.downstream.validate()?;
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::input(format!("line {line}: cannot parse {value:?} as a value for {key}"))
    })
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str, line: usize) -> Result<()> {
    macro_rules! num {
        () => {
            parse_num(key, value, line)?
        };
    }
    match key {
        "model.vocab_size" => cfg.model.vocab_size = num!(),
        "model.d_model" => cfg.model.d_model = num!(),
        "model.n_enc_layers" => cfg.model.n_enc_layers = num!(),
        "model.n_dec_layers" => cfg.model.n_dec_layers = num!(),
        "model.n_heads" => cfg.model.n_heads = num!(),
        "model.d_ff" => cfg.model.d_ff = num!(),
        "model.max_seq_len" => cfg.model.max_seq_len = num!(),

        "maml.outer_lr.plm" => cfg.maml.outer_lr.plm = num!(),
        "maml.outer_lr.prompt" => cfg.maml.outer_lr.prompt = num!(),
        "maml.outer_lr.adapter" => cfg.maml.outer_lr.adapter = num!(),
        "maml.outer_lr.meta_prompt" => cfg.maml.outer_lr.meta_prompt = num!(),
        "maml.outer_lr.meta_adapter" => cfg.maml.outer_lr.meta_adapter = num!(),
        "maml.inner_lr.plm" => cfg.maml.inner_lr.plm = num!(),
        "maml.inner_lr.prompt" => cfg.maml.inner_lr.prompt = num!(),
        "maml.inner_lr.adapter" => cfg.maml.inner_lr.adapter = num!(),
        "maml.inner_lr.meta_prompt" => cfg.maml.inner_lr.meta_prompt = num!(),
        "maml.inner_lr.meta_adapter" => cfg.maml.inner_lr.meta_adapter = num!(),
        "maml.inner_steps" => cfg.maml.inner_steps = num!(),
        "maml.support_size" => cfg.maml.support_size = num!(),
        "maml.query_size" => cfg.maml.query_size = num!(),
        "maml.epochs" => cfg.maml.epochs = num!(),
        "maml.task_batch" => cfg.maml.task_batch = num!(),
        "maml.weight_decay" => cfg.maml.weight_decay = num!(),

        "multitask.lr" => cfg.multitask.lr = num!(),
        "multitask.epochs" => cfg.multitask.epochs = num!(),
        "multitask.batch_size" => cfg.multitask.batch_size = num!(),
        "multitask.weight_decay" => cfg.multitask.weight_decay = num!(),

        "downstream.steps" => cfg.downstream.steps = num!(),
        "downstream.eval_every" => cfg.downstream.eval_every = num!(),
        "downstream.batch_size" => cfg.downstream.batch_size = num!(),
        "downstream.weight_decay" => cfg.downstream.weight_decay = num!(),
        "downstream.lr.full" => cfg.downstream.lr = num!(),
        "downstream.lr.prompt" => cfg.downstream_lr_prompt = num!(),
        "downstream.lr.adapter" => cfg.downstream_lr_adapter = num!(),

        "suite.seed" => cfg.suite_seed = num!(),
        "suite.size" => cfg.suite_size = num!(),
        "suite.train_fraction" => cfg.split_fractions.0 = num!(),
        "suite.dev_fraction" => cfg.split_fractions.1 = num!(),
        "suite.test_fraction" => cfg.split_fractions.2 = num!(),

        "elements.prompt_len" => cfg.prompt_len = num!(),
        "elements.meta_prompt_len" => cfg.meta_prompt_len = Some(num!()),
        "elements.bottleneck" => cfg.bottleneck = num!(),

        "run.seeds" => {
            let mut seeds = Vec::new();
            for part in value.split(',') {
                seeds.push(parse_num(key, part.trim(), line)?);
            }
            cfg.seeds = seeds;
        }
        "run.out_dir" => cfg.out_dir = PathBuf::from(value),
        "run.epsilon" => cfg.baseline_epsilon = num!(),

        _ => {
            return Err(Error::input(format!("line {line}: unknown config key {key:?}")));
        }
    }
    Ok(())
}

/// Parses config text over the defaults. Lines are `key = value`; blank
/// lines and `#` comments are ignored. Unknown keys are errors.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::input(format!("line {line}: expected `key = value`, got {trimmed:?}")))?;
        let key = key.trim();
        let value = value.trim();
        ensure_input!(!key.is_empty(), "line {line}: empty key");
        ensure_input!(!value.is_empty(), "line {line}: empty value for {key}");
        apply_key(&mut cfg, key, value, line)?;
    }
    Ok(cfg)
}

/// Loads and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = parse_config_str(&text)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
