//! Experiment driver: builds the task suite, runs one combination's
//! upstream→downstream pipeline per seed, and emits the matrix reports.
//!
//! Per-task method and baseline scores are averaged across seeds *before*
//! relative gains are computed (averaging gains instead is unstable near
//! small baselines). The full fine-tuning baseline is computed once per
//! (task, seed) and shared by every combination.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::combos::{Combination, Method};
use crate::config::RunConfig;
use crate::downstream::{
    build_report, finetune_downstream, finetune_full, score_task, write_report_csv,
    write_report_jsonl, EvalReport,
};
use crate::elements::{ElementKind, ElementSet};
use crate::error::{ensure_contract, ensure_input, Error, Result};
use crate::model::Seq2SeqModel;
use crate::tasks::{
    generate_suite, load_suite, random_task_split, save_suite, TaskDataset, TaskSplit, TaskType,
};
use crate::upstream::{maml_train, multitask_train, write_train_log, TrainRecord};

/// The materialized task suite plus its train/dev/test partition (by name).
/// Tasks are kept sorted by name so in-memory and on-disk suites agree.
#[derive(Debug, Clone)]
pub struct Suite {
    pub tasks: Vec<TaskDataset>,
    pub split: TaskSplit,
}

impl Suite {
    fn subset(&self, names: &[String]) -> Result<Vec<TaskDataset>> {
        names
            .iter()
            .map(|n| {
                self.tasks
                    .iter()
                    .find(|t| &t.name == n)
                    .cloned()
                    .ok_or_else(|| Error::input(format!("split names task {n:?} not in suite")))
            })
            .collect()
    }

    pub fn train_tasks(&self) -> Result<Vec<TaskDataset>> {
        self.subset(&self.split.train_tasks)
    }

    pub fn dev_tasks(&self) -> Result<Vec<TaskDataset>> {
        self.subset(&self.split.dev_tasks)
    }

    pub fn test_tasks(&self) -> Result<Vec<TaskDataset>> {
        self.subset(&self.split.test_tasks)
    }
}

/// Generates and partitions the suite described by the config.
pub fn build_suite(cfg: &RunConfig) -> Result<Suite> {
    let mut tasks = generate_suite(cfg.suite_seed, cfg.suite_size)?;
    tasks.sort_by(|a, b| a.name.cmp(&b.name));
    let names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
    let split = random_task_split(&names, cfg.split_fractions, cfg.suite_seed)?;
    Ok(Suite { tasks, split })
}

/// Writes the suite's task directories plus `split.json` under `dir`.
pub fn save_suite_dir(suite: &Suite, dir: &Path) -> Result<()> {
    save_suite(&suite.tasks, dir)?;
    let json = serde_json::to_string_pretty(&suite.split)?;
    fs::write(dir.join("split.json"), json)?;
    Ok(())
}

/// Loads a suite previously written by [`save_suite_dir`].
pub fn load_suite_dir(dir: &Path) -> Result<Suite> {
    let tasks = load_suite(dir)?;
    let path = dir.join("split.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let split: TaskSplit = serde_json::from_str(&text)?;
    let suite = Suite { tasks, split };
    // fail fast if the split references tasks that are not on disk
    suite.train_tasks()?;
    suite.dev_tasks()?;
    suite.test_tasks()?;
    Ok(suite)
}

/// splitmix64 finalizer: decorrelates derived seeds from their salt.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a task name, the salt behind each task's derived seed.
pub fn task_salt(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A fresh backbone with the requested elements attached. Each element kind
/// draws from its own derived RNG stream, so the backbone and any shared
/// elements are bitwise identical across combinations at a given seed.
pub fn build_model(cfg: &RunConfig, attachments: &ElementSet, seed: u64) -> Result<Seq2SeqModel> {
    let mut model = Seq2SeqModel::new(cfg.model.clone(), seed)?;
    // base elements first: meta variants wrap them
    let order = [
        ElementKind::Adapter,
        ElementKind::Prompt,
        ElementKind::MetaAdapter,
        ElementKind::MetaPrompt,
    ];
    for kind in order {
        if !attachments.contains(kind) {
            continue;
        }
        let kind_seed = mix_seed(seed, 101 + kind as u64);
        match kind {
            ElementKind::Plm => {} // the backbone itself
            ElementKind::MetaAdapter => model.insert_meta_adapters(cfg.bottleneck, kind_seed)?,
            ElementKind::MetaPrompt => model.attach_meta_prompt(cfg.meta_prompt_len(), kind_seed)?,
            ElementKind::Adapter => model.attach_adapter_bias(kind_seed)?,
            ElementKind::Prompt => model.attach_prompt(cfg.prompt_len, kind_seed)?,
        }
    }
    Ok(model)
}

/// Full fine-tuning reference scores, keyed by (task name, seed).
pub type BaselineScores = HashMap<(String, u64), f64>;

/// Trains and scores the full fine-tuning baseline on every (task, seed)
/// pair; combinations share this map.
pub fn compute_baselines(cfg: &RunConfig, test_tasks: &[TaskDataset]) -> Result<BaselineScores> {
    let mut jobs = Vec::new();
    for task in test_tasks {
        for &seed in &cfg.seeds {
            jobs.push((task, seed));
        }
    }
    let entries: Result<Vec<((String, u64), f64)>> = jobs
        .par_iter()
        .map(|&(task, seed)| {
            let mut model = build_model(cfg, &ElementSet::empty(), seed)?;
            let mut dcfg = cfg.downstream_for(None);
            dcfg.seed = mix_seed(seed, task_salt(&task.name));
            finetune_full(&mut model, task, &dcfg)?;
            let score = score_task(&model, task)?;
            Ok(((task.name.clone(), seed), score))
        })
        .collect();
    Ok(entries?.into_iter().collect())
}

/// Scores one parameter-efficient fine-tuning baseline: a never-primed model
/// gets a fresh prompt or adapter, tunes only that element on the task's
/// few-shot split, and is scored on the test split. These are the FT_P /
/// FT_A reference rows; the full-model analogue lives in
/// [`compute_baselines`].
pub fn run_ft_baseline(
    cfg: &RunConfig,
    task: &TaskDataset,
    kind: ElementKind,
    seed: u64,
) -> Result<f64> {
    ensure_input!(
        matches!(kind, ElementKind::Adapter | ElementKind::Prompt),
        "FT baselines tune a prompt or an adapter, got {kind:?}"
    );
    let downstream = ElementSet::from_kinds(&[kind]);
    let mut model = build_model(cfg, &downstream, seed)?;
    let mut dcfg = cfg.downstream_for(Some(kind));
    dcfg.seed = mix_seed(seed, task_salt(&task.name));
    finetune_downstream(&mut model, task, &downstream, &dcfg)?;
    score_task(&model, task)
}

/// Runs the combination's upstream stage in place on `model`: MAML or
/// multi-task training of the upstream set, or nothing for FT baselines
/// (returning an empty log).
pub fn run_upstream_stage(
    combo: &Combination,
    cfg: &RunConfig,
    train: &[TaskDataset],
    model: &mut Seq2SeqModel,
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    match combo.method {
        Method::Ft => Ok(Vec::new()),
        Method::Maml => {
            let mut mcfg = cfg.maml.clone();
            mcfg.seed = mix_seed(seed, 7);
            maml_train(model, train, &combo.upstream, &combo.downstream, &mcfg)
        }
        Method::Multitask => {
            let mut mcfg = cfg.multitask.clone();
            mcfg.seed = mix_seed(seed, 7);
            multitask_train(model, train, &combo.upstream, &mcfg)
        }
    }
}

/// Seed-averages per-task method scores against the baseline map, producing
/// `(task, type, method_score, baseline_score)` rows for report building.
pub fn averaged_rows(
    test: &[TaskDataset],
    per_seed_scores: &[Vec<f64>],
    baselines: &BaselineScores,
    seeds: &[u64],
) -> Result<Vec<(String, TaskType, f64, f64)>> {
    ensure_contract!(
        per_seed_scores.len() == seeds.len()
            && per_seed_scores.iter().all(|s| s.len() == test.len()),
        "per-seed score matrix must be seeds x tasks"
    );
    let n = seeds.len() as f64;
    let mut rows = Vec::with_capacity(test.len());
    for (ti, task) in test.iter().enumerate() {
        let method = per_seed_scores.iter().map(|s| s[ti]).sum::<f64>() / n;
        let mut base = 0.0;
        for &seed in seeds {
            base += baselines.get(&(task.name.clone(), seed)).copied().ok_or_else(|| {
                Error::contract(format!("no baseline score for task {} seed {seed}", task.name))
            })?;
        }
        rows.push((task.name.clone(), task.task_type, method, base / n));
    }
    Ok(rows)
}

/// One combination end to end: per seed, build a fresh model, attach the
/// union of both stages' elements, run the upstream method (nothing for FT),
/// then tune and score each test task downstream. Scores are seed-averaged
/// per task before gains. With `out_dir`, writes per-seed upstream logs and
/// the combination's report files under `<out_dir>/<abbreviation>/`.
pub fn run_combination(
    combo: &Combination,
    cfg: &RunConfig,
    train: &[TaskDataset],
    test: &[TaskDataset],
    baselines: &BaselineScores,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    ensure_input!(!test.is_empty(), "no test tasks to evaluate");
    let combo_dir = match out_dir {
        Some(dir) => {
            let d = dir.join(&combo.abbreviation);
            fs::create_dir_all(&d)?;
            Some(d)
        }
        None => None,
    };

    let mut per_seed: Vec<Vec<f64>> = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut model = build_model(cfg, &combo.required_attachments(), seed)?;
        let records = run_upstream_stage(combo, cfg, train, &mut model, seed)?;
        if let Some(dir) = &combo_dir {
            write_train_log(&dir.join(format!("upstream_seed{seed}.jsonl")), &records)?;
        }

        let kind = combo.downstream.iter().next().expect("downstream validated non-empty");
        let mut scores = Vec::with_capacity(test.len());
        for task in test {
            let mut tuned = model.clone();
            let mut dcfg = cfg.downstream_for(Some(kind));
            dcfg.seed = mix_seed(seed, task_salt(&task.name));
            finetune_downstream(&mut tuned, task, &combo.downstream, &dcfg)?;
            scores.push(score_task(&tuned, task)?);
        }
        per_seed.push(scores);
    }

    let rows = averaged_rows(test, &per_seed, baselines, &cfg.seeds)?;
    let report = build_report(&rows, cfg.baseline_epsilon)?;
    if let Some(dir) = &combo_dir {
        write_report_csv(&report, &dir.join("report.csv"))?;
        write_report_jsonl(&report, &dir.join("report.jsonl"))?;
    }
    Ok(report)
}

/// Runs a set of combinations over the suite, sharing one baseline map.
/// Combinations execute in parallel; each owns a full model clone and RNG
/// stream, so results are independent of scheduling.
pub fn run_matrix(
    cfg: &RunConfig,
    suite: &Suite,
    combos: &[Combination],
    out_dir: Option<&Path>,
) -> Result<Vec<(Combination, EvalReport)>> {
    cfg.validate()?;
    ensure_input!(!combos.is_empty(), "no combinations to run");
    let train = suite.train_tasks()?;
    let test = suite.test_tasks()?;
    let baselines = compute_baselines(cfg, &test)?;
    combos
        .par_iter()
        .map(|combo| {
            run_combination(combo, cfg, &train, &test, &baselines, out_dir)
                .map(|report| (combo.clone(), report))
        })
        .collect()
}

fn fmt_f64(x: f64) -> String {
    // 17 significant digits always round-trips f64, so downstream
    // recomputation from these files is exact
    format!("{x:.16e}")
}

/// Writes `scatter.csv` (one row per combination) and `per_task.csv` (one
/// row per combination x task; excluded tasks carry an empty gain).
pub fn emit_matrix_report(
    outcomes: &[(Combination, EvalReport)],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    ensure_input!(!outcomes.is_empty(), "no reports to emit");
    fs::create_dir_all(out_dir)?;

    let scatter_path = out_dir.join("scatter.csv");
    let mut scatter = String::from("abbreviation,method,upstream,downstream,arg,rgstd,n_excluded\n");
    for (combo, report) in outcomes {
        let method = match combo.method {
            Method::Maml => "MAML",
            Method::Multitask => "Multitask",
            Method::Ft => "FT",
        };
        scatter.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            combo.abbreviation,
            method,
            combo.upstream,
            combo.downstream,
            fmt_f64(report.arg),
            fmt_f64(report.rgstd),
            report.excluded.len()
        ));
    }
    fs::write(&scatter_path, scatter)?;

    let per_task_path = out_dir.join("per_task.csv");
    let mut per_task = String::from("abbreviation,task,relative_gain\n");
    for (combo, report) in outcomes {
        for row in &report.per_task {
            let gain = row.relative_gain.map(fmt_f64).unwrap_or_default();
            per_task.push_str(&format!("{},{},{}\n", combo.abbreviation, row.task, gain));
        }
    }
    fs::write(&per_task_path, per_task)?;
    Ok((scatter_path, per_task_path))
}
