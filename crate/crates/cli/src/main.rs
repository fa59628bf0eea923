//! Command-line driver for the priming experiment matrix.
//!
//! The pipeline commands compose: `gen-tasks` materializes a task suite,
//! `train-upstream` primes a model and saves a checkpoint, `finetune` and
//! `evaluate` work per task, `run-combination` / `run-matrix` run whole
//! pipelines, and `report` regenerates the matrix CSVs from saved reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use priming::checkpoint;
use priming::combos::{enumerate_combinations, find_combination, Combination};
use priming::config::{load_config, RunConfig};
use priming::downstream::{finetune_downstream, read_report_jsonl, score_task};
use priming::model::Seq2SeqModel;
use priming::runner::{
    build_model, build_suite, compute_baselines, emit_matrix_report, load_suite_dir,
    run_combination, run_matrix, save_suite_dir, Suite,
};
use priming::tasks::TaskDataset;
use priming::upstream::write_train_log;

#[derive(Parser)]
#[command(name = "priming", version, about = "Two-stage parameter-efficient fine-tuning workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat `key = value`); defaults apply if omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding a materialized task suite
    #[arg(long, global = true)]
    tasks_dir: Option<PathBuf>,
    /// Output directory (reports, checkpoints, logs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the soft-prompt length
    #[arg(long, global = true, value_parser = ["16", "20", "100"])]
    prompt_len: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and write it under --tasks-dir
    GenTasks,
    /// Run one combination's upstream stage and save a checkpoint under --out
    TrainUpstream {
        /// Combination abbreviation, e.g. Meta_M_P
        #[arg(long)]
        abbr: String,
    },
    /// Fine-tune a checkpoint's downstream elements on one task
    Finetune {
        #[arg(long)]
        abbr: String,
        /// Task name within the suite
        #[arg(long)]
        task: String,
        /// Checkpoint written by train-upstream (omit to start untrained)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on one task's test split
    Evaluate {
        #[arg(long)]
        abbr: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one combination end to end and write its report under --out
    RunCombination {
        #[arg(long)]
        abbr: String,
    },
    /// Run every combination and write per-combination reports plus matrix CSVs
    RunMatrix,
    /// Regenerate matrix CSVs from per-combination reports under --out
    Report,
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(len) = &common.prompt_len {
        cfg.prompt_len = len.parse().expect("validated by clap");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().context("--out is required for this command")
}

fn load_tasks(common: &Common, cfg: &RunConfig) -> Result<Suite> {
    match &common.tasks_dir {
        Some(dir) => Ok(load_suite_dir(dir)?),
        None => Ok(build_suite(cfg)?),
    }
}

fn find_task(suite: &Suite, name: &str) -> Result<TaskDataset> {
    suite
        .tasks
        .iter()
        .find(|t| t.name == name)
        .cloned()
        .with_context(|| format!("task {name:?} not found in the suite"))
}

fn working_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

/// Builds the combination's model at `seed`, optionally restoring a
/// checkpoint over the fresh initialization.
fn model_for(
    combo: &Combination,
    cfg: &RunConfig,
    seed: u64,
    ckpt: Option<&PathBuf>,
) -> Result<Seq2SeqModel> {
    let mut model = build_model(cfg, &combo.required_attachments(), seed)?;
    if let Some(path) = ckpt {
        let loaded = checkpoint::load(path)?;
        checkpoint::restore_into(model.store_mut(), &loaded)?;
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_run_config(&cli.common)?;
    match &cli.command {
        Command::GenTasks => {
            let dir = cli
                .common
                .tasks_dir
                .as_deref()
                .context("--tasks-dir is required for gen-tasks")?;
            let suite = build_suite(&cfg)?;
            std::fs::create_dir_all(dir)?;
            save_suite_dir(&suite, dir)?;
            println!(
                "wrote {} tasks ({} train / {} dev / {} test) to {}",
                suite.tasks.len(),
                suite.split.train_tasks.len(),
                suite.split.dev_tasks.len(),
                suite.split.test_tasks.len(),
                dir.display()
            );
        }
        Command::TrainUpstream { abbr } => {
            let combo = find_combination(abbr)?;
            let out = require_out(&cli.common)?;
            let suite = load_tasks(&cli.common, &cfg)?;
            let train = suite.train_tasks()?;
            let seed = working_seed(&cfg);
            let mut model = build_model(&cfg, &combo.required_attachments(), seed)?;
            let records = priming::runner::run_upstream_stage(&combo, &cfg, &train, &mut model, seed)?;
            std::fs::create_dir_all(out)?;
            let ckpt_path = out.join("checkpoint.bin");
            checkpoint::save(&ckpt_path, &cfg.model, model.store())?;
            write_train_log(&out.join("upstream.jsonl"), &records)?;
            println!(
                "{abbr} upstream: {} log records, checkpoint {}",
                records.len(),
                ckpt_path.display()
            );
        }
        Command::Finetune { abbr, task, checkpoint: ckpt } => {
            let combo = find_combination(abbr)?;
            let out = require_out(&cli.common)?;
            let suite = load_tasks(&cli.common, &cfg)?;
            let task = find_task(&suite, task)?;
            let seed = working_seed(&cfg);
            let mut model = model_for(&combo, &cfg, seed, ckpt.as_ref())?;
            let kind = combo
                .downstream
                .iter()
                .next()
                .expect("combination downstream is validated non-empty");
            let mut dcfg = cfg.downstream_for(Some(kind));
            dcfg.seed = seed;
            let outcome = finetune_downstream(&mut model, &task, &combo.downstream, &dcfg)?;
            std::fs::create_dir_all(out)?;
            let tuned_path = out.join("tuned.bin");
            checkpoint::save(&tuned_path, &cfg.model, model.store())?;
            println!(
                "{abbr} on {}: best dev score {:.4} after {} steps, checkpoint {}",
                task.name,
                outcome.best_dev_score,
                outcome.steps_run,
                tuned_path.display()
            );
        }
        Command::Evaluate { abbr, task, checkpoint: ckpt } => {
            let combo = find_combination(abbr)?;
            let suite = load_tasks(&cli.common, &cfg)?;
            let task = find_task(&suite, task)?;
            let model = model_for(&combo, &cfg, working_seed(&cfg), ckpt.as_ref())?;
            let score = score_task(&model, &task)?;
            println!("{} score {:.4}", task.name, score);
        }
        Command::RunCombination { abbr } => {
            let combo = find_combination(abbr)?;
            let out = require_out(&cli.common)?;
            let suite = load_tasks(&cli.common, &cfg)?;
            let train = suite.train_tasks()?;
            let test = suite.test_tasks()?;
            let baselines = compute_baselines(&cfg, &test)?;
            let report = run_combination(&combo, &cfg, &train, &test, &baselines, Some(out))?;
            println!(
                "{abbr}: ARG {:+.4} RGSTD {:.4} ({} tasks, {} excluded)",
                report.arg,
                report.rgstd,
                report.per_task.len(),
                report.excluded.len()
            );
        }
        Command::RunMatrix => {
            let out = require_out(&cli.common)?;
            let suite = load_tasks(&cli.common, &cfg)?;
            let combos = enumerate_combinations();
            let outcomes = run_matrix(&cfg, &suite, &combos, Some(out))?;
            let (scatter, per_task) = emit_matrix_report(&outcomes, out)?;
            println!("wrote {} and {}", scatter.display(), per_task.display());
        }
        Command::Report => {
            let out = require_out(&cli.common)?;
            let mut outcomes = Vec::new();
            for combo in enumerate_combinations() {
                let path = out.join(&combo.abbreviation).join("report.jsonl");
                if path.exists() {
                    outcomes.push((combo, read_report_jsonl(&path)?));
                }
            }
            if outcomes.is_empty() {
                bail!("no per-combination reports under {}", out.display());
            }
            let (scatter, per_task) = emit_matrix_report(&outcomes, out)?;
            println!(
                "aggregated {} combination reports into {} and {}",
                outcomes.len(),
                scatter.display(),
                per_task.display()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
