//! Downstream few-shot fine-tuning and relative-gain evaluation.
//!
//! The downstream stage adapts only prompt/adapter elements on a task's
//! few-shot train split, keeping the parameter state that scored best on the
//! dev split. Scoring is task-type aware: classification tasks use
//! exact-match accuracy of the greedily decoded string against the label,
//! generation tasks use whitespace-token F1 against the reference. Scores
//! roll up into per-task relative gains against a baseline (with an epsilon
//! exclusion for near-zero baselines, which would otherwise explode the
//! ratio), and aggregate into ARG (mean relative gain) and RGSTD (population
//! standard deviation of relative gains).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elements::{ElementKind, ElementSet};
use crate::error::{ensure_contract, ensure_input, Error, Result};
use crate::model::Seq2SeqModel;
use crate::optim::{adamw_step, AdamWState, OptimizerConfig};
use crate::tasks::{TaskDataset, TaskType};

/// Baselines scoring below this are excluded from relative-gain aggregation.
pub const BASELINE_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub lr: f64,
    pub steps: usize,
    /// Dev-score checkpointing interval.
    pub eval_every: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            lr: 1e-3,
            steps: 300,
            eval_every: 50,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        ensure_contract!(self.eval_every >= 1, "eval_every must be >= 1");
        ensure_contract!(self.batch_size >= 1, "batch_size must be >= 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub best_dev_score: f64,
    pub steps_run: usize,
}

/// A decode budget long enough for any of the task's references.
pub fn task_decode_len(task: &TaskDataset) -> usize {
    task.train
        .iter()
        .chain(&task.dev)
        .chain(&task.test)
        .map(|(_, o)| o.len())
        .max()
        .unwrap_or(0)
        + 4
}

/// Shared training loop: AdamW on `trainable` over the task's train split
/// with periodic dev scoring; the model ends at the best-dev parameter
/// state (only `trainable` values are snapshot/restored).
fn train_on_task(
    model: &mut Seq2SeqModel,
    task: &TaskDataset,
    trainable: &ElementSet,
    cfg: &DownstreamConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    ensure_input!(!task.train.is_empty(), "task {:?} has no train examples", task.name);
    ensure_input!(!task.dev.is_empty(), "task {:?} has no dev examples", task.name);
    crate::elements::partition_parameters(model.store(), trainable)?;

    let names = model.store().names_in(trainable);
    let opt = OptimizerConfig::adamw(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut state = AdamWState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best = model.store().snapshot(trainable);
    let mut best_score = score_split(model, &task.dev, task.task_type, task_decode_len(task))?;

    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut cursor = order.len(); // forces a reshuffle on the first step
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(task.train.len()) {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(task.train[order[cursor]].clone());
            cursor += 1;
        }
        model.zero_grads();
        model.loss_backward(&batch, trainable)?;
        adamw_step(model.store_mut(), &names, &opt, &mut state)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let score = score_split(model, &task.dev, task.task_type, task_decode_len(task))?;
            // ties prefer the later state: the dev metric is coarse, and a
            // same-scoring later checkpoint has had more loss reduction
            if score >= best_score {
                best_score = score;
                best = model.store().snapshot(trainable);
            }
        }
    }
    model.store_mut().restore(&best)?;
    model.zero_grads();
    Ok(FinetuneOutcome { best_dev_score: best_score, steps_run: cfg.steps })
}

/// Few-shot downstream adaptation of prompt/adapter elements only.
pub fn finetune_downstream(
    model: &mut Seq2SeqModel,
    task: &TaskDataset,
    downstream: &ElementSet,
    cfg: &DownstreamConfig,
) -> Result<FinetuneOutcome> {
    ensure_contract!(
        !downstream.is_empty() && downstream.is_subset_of(&ElementSet::downstream_allowed()),
        "downstream set {downstream} may contain only adapters and prompts"
    );
    train_on_task(model, task, downstream, cfg)
}

/// Full-model fine-tuning (backbone parameters); the reference system that
/// relative gains are computed against, and the engine of the FT baselines'
/// own scoring denominator.
pub fn finetune_full(
    model: &mut Seq2SeqModel,
    task: &TaskDataset,
    cfg: &DownstreamConfig,
) -> Result<FinetuneOutcome> {
    let full = ElementSet::from_kinds(&[ElementKind::Plm]);
    train_on_task(model, task, &full, cfg)
}

/// Whitespace-token F1 between a prediction and a reference (multiset
/// overlap). Both empty scores 1, one empty scores 0.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    if pred.is_empty() && refr.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in &refr {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        let c = counts.entry(t).or_insert(0);
        if *c > 0 {
            *c -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / refr.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scores decoded outputs against references: exact match for
/// classification, token F1 for generation.
pub fn score_split(
    model: &Seq2SeqModel,
    pairs: &[(String, String)],
    task_type: TaskType,
    max_decode_len: usize,
) -> Result<f64> {
    ensure_input!(!pairs.is_empty(), "cannot score an empty split");
    let inputs: Vec<&str> = pairs.iter().map(|(i, _)| i.as_str()).collect();
    let decoded = model.decode_strings(&inputs, max_decode_len)?;
    let total: f64 = decoded
        .iter()
        .zip(pairs)
        .map(|(pred, (_, reference))| match task_type {
            TaskType::Classification => {
                if pred == reference {
                    1.0
                } else {
                    0.0
                }
            }
            TaskType::Generation => token_f1(pred, reference),
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Test-split score in the task-appropriate metric.
pub fn score_task(model: &Seq2SeqModel, task: &TaskDataset) -> Result<f64> {
    score_split(model, &task.test, task.task_type, task_decode_len(task))
}

/// Relative gain of a method over a baseline on one task, or exclusion when
/// the baseline is too close to zero for the ratio to mean anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gain {
    Included(f64),
    Excluded,
}

pub fn relative_gain(method_score: f64, baseline_score: f64, epsilon: f64) -> Result<Gain> {
    ensure_contract!(
        method_score >= 0.0 && baseline_score >= 0.0,
        "scores must be non-negative, got method {method_score}, baseline {baseline_score}"
    );
    if baseline_score < epsilon {
        return Ok(Gain::Excluded);
    }
    Ok(Gain::Included((method_score - baseline_score) / baseline_score))
}

/// Mean (ARG) and population standard deviation (RGSTD) of included gains.
pub fn aggregate(gains: &[f64]) -> Result<(f64, f64)> {
    ensure_input!(!gains.is_empty(), "no included relative gains to aggregate");
    let n = gains.len() as f64;
    let arg = gains.iter().sum::<f64>() / n;
    let var = gains.iter().map(|g| (g - arg) * (g - arg)).sum::<f64>() / n;
    Ok((arg, var.sqrt()))
}

/// One task's row in an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGain {
    pub task: String,
    pub task_type: TaskType,
    pub method_score: f64,
    pub baseline_score: f64,
    /// `None` when the task was excluded for a near-zero baseline.
    pub relative_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskGain>,
    pub arg: f64,
    pub rgstd: f64,
    pub excluded: Vec<String>,
}

/// Builds a report from `(task, task_type, method_score, baseline_score)`
/// rows; excluded tasks stay listed with a flag.
pub fn build_report(rows: &[(String, TaskType, f64, f64)], epsilon: f64) -> Result<EvalReport> {
    let mut per_task = Vec::with_capacity(rows.len());
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for (task, task_type, method, baseline) in rows {
        let gain = match relative_gain(*method, *baseline, epsilon)? {
            Gain::Included(g) => {
                included.push(g);
                Some(g)
            }
            Gain::Excluded => {
                excluded.push(task.clone());
                None
            }
        };
        per_task.push(TaskGain {
            task: task.clone(),
            task_type: *task_type,
            method_score: *method,
            baseline_score: *baseline,
            relative_gain: gain,
        });
    }
    let (arg, rgstd) = aggregate(&included)?;
    Ok(EvalReport { per_task, arg, rgstd, excluded })
}

/// CSV with one row per task.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut body = String::from("task,task_type,method_score,baseline_score,relative_gain,excluded\n");
    for row in &report.per_task {
        let ttype = match row.task_type {
            TaskType::Classification => "classification",
            TaskType::Generation => "generation",
        };
        let gain = row.relative_gain.map(|g| format!("{g}")).unwrap_or_default();
        let excluded = row.relative_gain.is_none();
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.task, ttype, row.method_score, row.baseline_score, gain, excluded
        ));
    }
    fs::write(path, body)?;
    Ok(())
}

/// Line-delimited JSON: per-task records then a summary record.
pub fn write_report_jsonl(report: &EvalReport, path: &Path) -> Result<()> {
    let mut body = String::new();
    for row in &report.per_task {
        body.push_str(&serde_json::to_string(row)?);
        body.push('\n');
    }
    body.push_str(&serde_json::to_string(
        &serde_json::json!({"arg": report.arg, "rgstd": report.rgstd, "excluded": report.excluded}),
    )?);
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

/// Reads a report written by [`write_report_jsonl`]: per-task lines followed
/// by the trailing summary line.
pub fn read_report_jsonl(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    ensure_input!(!lines.is_empty(), "report {} is empty", path.display());
    #[derive(serde::Deserialize)]
    struct Summary {
        arg: f64,
        rgstd: f64,
        excluded: Vec<String>,
    }
    let summary: Summary = serde_json::from_str(lines.pop().expect("non-empty"))
        .map_err(|e| Error::input(format!("{}: malformed summary line: {e}", path.display())))?;
    let per_task = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<TaskGain>(l).map_err(|e| {
                Error::input(format!("{} line {}: malformed task row: {e}", path.display(), i + 1))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { per_task, arg: summary.arg, rgstd: summary.rgstd, excluded: summary.excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::generate_task;

    fn tiny_model(seed: u64) -> Seq2SeqModel {
        let cfg = ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
        };
        Seq2SeqModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn token_f1_matches_hand_computed_cases() {
        assert!((token_f1("a b c", "a b d") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("", "ref"), 0.0);
        assert_eq!(token_f1("pred", ""), 0.0);
        assert_eq!(token_f1("x y", "x y"), 1.0);
        assert_eq!(token_f1("q", "a b"), 0.0);
        // multiset: repeated token only counts while the reference has copies
        assert!((token_f1("a a", "a") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relative_gain_reproduces_published_spot_values() {
        match relative_gain(0.86, 0.86, BASELINE_EPSILON).unwrap() {
            Gain::Included(g) => assert_eq!(g, 0.0),
            _ => panic!("unexpected exclusion"),
        }
        match relative_gain(0.33, 0.29, BASELINE_EPSILON).unwrap() {
            Gain::Included(g) => assert!((g - 0.1379).abs() < 1e-4, "got {g}"),
            _ => panic!("unexpected exclusion"),
        }
        assert_eq!(relative_gain(0.02, 0.0, BASELINE_EPSILON).unwrap(), Gain::Excluded);
        assert!(relative_gain(-0.1, 0.5, BASELINE_EPSILON).is_err());
    }

    #[test]
    fn aggregate_handles_the_trivial_cases() {
        let (arg, rgstd) = aggregate(&[0.25]).unwrap();
        assert_eq!((arg, rgstd), (0.25, 0.0));
        let (arg, rgstd) = aggregate(&[0.1, -0.1]).unwrap();
        assert!(arg.abs() < 1e-15 && (rgstd - 0.1).abs() < 1e-15);
        assert!(matches!(aggregate(&[]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn aggregate_matches_a_naive_two_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let gains: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (arg, rgstd) = aggregate(&gains).unwrap();
            let mean = gains.iter().sum::<f64>() / gains.len() as f64;
            let std = (gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>()
                / gains.len() as f64)
                .sqrt();
            assert!((arg - mean).abs() < 1e-12);
            assert!((rgstd - std).abs() < 1e-12);
        }
    }

    #[test]
    fn gains_are_scale_invariant() {
        let rows = [(0.4, 0.5), (0.9, 0.6), (0.2, 0.8)];
        for (m, b) in rows {
            let g1 = match relative_gain(m, b, BASELINE_EPSILON).unwrap() {
                Gain::Included(g) => g,
                _ => unreachable!(),
            };
            let g2 = match relative_gain(m * 0.37, b * 0.37, BASELINE_EPSILON * 0.37).unwrap() {
                Gain::Included(g) => g,
                _ => unreachable!(),
            };
            assert!((g1 - g2).abs() < 1e-12);
        }
    }

    #[test]
    fn lowering_epsilon_never_excludes_more_tasks() {
        let scores = [(0.5, 0.005), (0.5, 0.02), (0.5, 0.3)];
        let count_excluded = |eps: f64| {
            scores
                .iter()
                .filter(|(m, b)| matches!(relative_gain(*m, *b, eps).unwrap(), Gain::Excluded))
                .count()
        };
        let mut eps = 0.5;
        let mut last = count_excluded(eps);
        while eps > 1e-4 {
            eps /= 2.0;
            let now = count_excluded(eps);
            assert!(now <= last, "lowering epsilon excluded more tasks");
            last = now;
        }
    }

    #[test]
    fn build_report_keeps_excluded_tasks_visible() {
        let rows = vec![
            ("alpha".to_string(), TaskType::Classification, 0.8, 0.4),
            ("beta".to_string(), TaskType::Generation, 0.5, 0.0),
            ("gamma".to_string(), TaskType::Classification, 0.3, 0.6),
        ];
        let report = build_report(&rows, BASELINE_EPSILON).unwrap();
        assert_eq!(report.per_task.len(), 3);
        assert_eq!(report.excluded, vec!["beta".to_string()]);
        assert!(report.per_task[1].relative_gain.is_none());
        let expected_arg = (1.0 + (-0.5)) / 2.0;
        assert!((report.arg - expected_arg).abs() < 1e-12);
    }

    #[test]
    fn report_files_round_trip_the_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ("alpha".to_string(), TaskType::Classification, 0.8, 0.4),
            ("beta".to_string(), TaskType::Generation, 0.5, 0.001),
        ];
        let report = build_report(&rows, BASELINE_EPSILON).unwrap();
        let csv_path = dir.path().join("report.csv");
        write_report_csv(&report, &csv_path).unwrap();
        let csv = fs::read_to_string(&csv_path).unwrap();
        assert!(csv.lines().count() == 3);
        assert!(csv.contains("beta,generation,0.5,0.001,,true"));
        let jsonl_path = dir.path().join("report.jsonl");
        write_report_jsonl(&report, &jsonl_path).unwrap();
        let body = fs::read_to_string(&jsonl_path).unwrap();
        let first: TaskGain = serde_json::from_str(body.lines().next().unwrap()).unwrap();
        assert_eq!(first, report.per_task[0]);
        let loaded = read_report_jsonl(&jsonl_path).unwrap();
        assert_eq!(loaded, report);
        let garbled = dir.path().join("garbled.jsonl");
        fs::write(&garbled, "{\"task\": \"x\"}\n").unwrap();
        assert!(read_report_jsonl(&garbled).is_err());
    }

    #[test]
    fn zero_steps_returns_the_model_bitwise_identical() {
        let mut model = tiny_model(1);
        model.attach_prompt(4, 2).unwrap();
        let task = generate_task("string_copy", 1).unwrap();
        let before = model.store().fingerprints();
        let cfg = DownstreamConfig { steps: 0, ..DownstreamConfig::default() };
        let prompt = ElementSet::from_kinds(&[ElementKind::Prompt]);
        finetune_downstream(&mut model, &task, &prompt, &cfg).unwrap();
        assert_eq!(before, model.store().fingerprints());
    }

    #[test]
    fn adapter_tuning_leaves_prompt_and_backbone_bitwise_unchanged() {
        let mut model = tiny_model(3);
        model.attach_prompt(4, 4).unwrap();
        model.attach_adapter_bias(5).unwrap();
        let task = generate_task("string_copy", 2).unwrap();
        let before = model.store().fingerprints();
        let cfg = DownstreamConfig { steps: 5, eval_every: 5, lr: 0.01, ..DownstreamConfig::default() };
        let adapters = ElementSet::from_kinds(&[ElementKind::Adapter]);
        finetune_downstream(&mut model, &task, &adapters, &cfg).unwrap();
        let after = model.store().fingerprints();
        let mut adapter_changed = false;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            match model.store().get(name).unwrap().kind {
                ElementKind::Adapter => adapter_changed |= a != b,
                _ => assert_eq!(a, b, "{name} changed during adapter tuning"),
            }
        }
        assert!(adapter_changed, "adapters never moved");
    }

    #[test]
    fn downstream_set_with_plm_is_a_contract_violation() {
        let mut model = tiny_model(6);
        let task = generate_task("string_copy", 3).unwrap();
        let bad = ElementSet::from_kinds(&[ElementKind::Plm]);
        let err = finetune_downstream(&mut model, &task, &bad, &DownstreamConfig::default());
        assert!(matches!(err, Err(crate::Error::Contract(_))));
        let meta = ElementSet::from_kinds(&[ElementKind::MetaPrompt]);
        let err = finetune_downstream(&mut model, &task, &meta, &DownstreamConfig::default());
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn tuning_never_hurts_dev_score_relative_to_the_untouched_model() {
        let mut model = tiny_model(7);
        model.attach_adapter_bias(8).unwrap();
        let task = generate_task("keyword_sentiment", 4).unwrap();
        let untuned = score_split(&model, &task.dev, task.task_type, task_decode_len(&task)).unwrap();
        let cfg = DownstreamConfig { steps: 30, eval_every: 10, lr: 0.02, ..DownstreamConfig::default() };
        let adapters = ElementSet::from_kinds(&[ElementKind::Adapter]);
        let outcome = finetune_downstream(&mut model, &task, &adapters, &cfg).unwrap();
        assert!(
            outcome.best_dev_score >= untuned,
            "tuning made dev score worse: {} -> {}",
            untuned,
            outcome.best_dev_score
        );
    }

    #[test]
    fn full_finetuning_is_deterministic_under_a_fixed_seed() {
        let task = generate_task("string_copy", 5).unwrap();
        let run = || {
            let mut model = tiny_model(9);
            let cfg = DownstreamConfig { steps: 10, eval_every: 10, ..DownstreamConfig::default() };
            finetune_full(&mut model, &task, &cfg).unwrap();
            model.store().fingerprints()
        };
        assert_eq!(run(), run());
    }
}
