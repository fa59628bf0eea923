//! End-to-end tests of the command-line surface: every subcommand exercised
//! against a miniature suite, plus the error paths users actually hit.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// Small enough to run in seconds, large enough that the full-fine-tune
/// baseline clears the exclusion threshold on the singleton test task.
const TINY_CONF: &str = "\
model.d_model = 16
model.n_enc_layers = 1
model.n_dec_layers = 1
model.d_ff = 32
suite.size = 2
suite.train_fraction = 0.5
suite.dev_fraction = 0.0
suite.test_fraction = 0.5
maml.epochs = 1
maml.inner_steps = 1
maml.support_size = 4
maml.query_size = 4
multitask.epochs = 1
multitask.batch_size = 16
downstream.steps = 40
downstream.eval_every = 20
downstream.batch_size = 16
run.seeds = 0
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_priming"))
}

fn write_conf(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.conf");
    std::fs::write(&path, TINY_CONF).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(&out),
        stderr(&out)
    );
    stdout(&out)
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded\nstdout: {}",
        stdout(&out)
    );
    let err = stderr(&out);
    assert!(err.contains("error:"), "diagnostic missing from stderr: {err}");
    err
}

fn first_test_task(tasks_dir: &Path) -> String {
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tasks_dir.join("split.json")).unwrap())
            .unwrap();
    split["test_tasks"][0].as_str().unwrap().to_string()
}

#[test]
fn full_flow_from_tasks_to_matrix_report() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path());
    let tasks = tmp.path().join("tasks");

    // gen-tasks materializes the suite on disk
    let out = run_ok(bin().args(["--config"]).arg(&conf).arg("--tasks-dir").arg(&tasks).arg("gen-tasks"));
    assert!(out.contains("wrote 2 tasks"), "unexpected gen-tasks output: {out}");
    assert!(tasks.join("split.json").is_file());
    let task = first_test_task(&tasks);

    // train-upstream saves a checkpoint and a training log
    let up = tmp.path().join("up");
    let out = run_ok(
        bin()
            .args(["--config"])
            .arg(&conf)
            .arg("--tasks-dir")
            .arg(&tasks)
            .arg("--out")
            .arg(&up)
            .args(["train-upstream", "--abbr", "Multi_P_P"]),
    );
    assert!(out.contains("checkpoint"), "unexpected train-upstream output: {out}");
    assert!(up.join("checkpoint.bin").is_file());
    assert!(up.join("upstream.jsonl").is_file());

    // finetune resumes from the checkpoint and saves the tuned model
    let ft = tmp.path().join("ft");
    let out = run_ok(
        bin()
            .args(["--config"])
            .arg(&conf)
            .arg("--tasks-dir")
            .arg(&tasks)
            .arg("--out")
            .arg(&ft)
            .args(["finetune", "--abbr", "Multi_P_P", "--task", &task, "--checkpoint"])
            .arg(up.join("checkpoint.bin")),
    );
    assert!(out.contains("best dev score"), "unexpected finetune output: {out}");
    assert!(ft.join("tuned.bin").is_file());

    // evaluate scores the tuned checkpoint on the task's test split
    let out = run_ok(
        bin()
            .args(["--config"])
            .arg(&conf)
            .arg("--tasks-dir")
            .arg(&tasks)
            .args(["evaluate", "--abbr", "Multi_P_P", "--task", &task, "--checkpoint"])
            .arg(ft.join("tuned.bin")),
    );
    assert!(out.contains("score"), "unexpected evaluate output: {out}");

    // run-combination writes the per-combination report files
    let run_dir = tmp.path().join("runs");
    let out = run_ok(
        bin()
            .args(["--config"])
            .arg(&conf)
            .arg("--tasks-dir")
            .arg(&tasks)
            .arg("--out")
            .arg(&run_dir)
            .args(["run-combination", "--abbr", "FT_P"]),
    );
    assert!(out.contains("ARG"), "unexpected run-combination output: {out}");
    assert!(run_dir.join("FT_P/report.csv").is_file());
    assert!(run_dir.join("FT_P/report.jsonl").is_file());

    // report aggregates whatever per-combination reports exist
    let out = run_ok(
        bin().args(["--config"]).arg(&conf).arg("--out").arg(&run_dir).arg("report"),
    );
    assert!(out.contains("aggregated 1 combination reports"), "unexpected report output: {out}");
    assert!(run_dir.join("scatter.csv").is_file());
    assert!(run_dir.join("per_task.csv").is_file());
}

#[test]
fn unknown_abbreviation_fails_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path());
    let err = run_err(
        bin()
            .args(["--config"])
            .arg(&conf)
            .arg("--out")
            .arg(tmp.path().join("out"))
            .args(["train-upstream", "--abbr", "Meta_Z_P"]),
    );
    assert!(err.contains("Meta_Z_P"), "diagnostic should name the bad abbreviation: {err}");
}

#[test]
fn missing_out_dir_fails_before_any_work() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path());
    let err = run_err(
        bin().args(["--config"]).arg(&conf).args(["train-upstream", "--abbr", "Multi_P_P"]),
    );
    assert!(err.contains("--out"), "diagnostic should mention the missing flag: {err}");
}

#[test]
fn malformed_config_reports_the_offending_line() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("broken.conf");
    std::fs::write(&path, "model.d_model = 16\nnot a key value pair\n").unwrap();
    let err = run_err(bin().args(["--config"]).arg(&path).arg("gen-tasks"));
    assert!(err.contains("line 2"), "diagnostic should cite the line number: {err}");
}

#[test]
fn unknown_task_name_fails_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path());
    let err = run_err(
        bin()
            .args(["--config"])
            .arg(&conf)
            .args(["evaluate", "--abbr", "FT_P", "--task", "no_such_task"]),
    );
    assert!(err.contains("no_such_task"), "diagnostic should name the missing task: {err}");
}

#[test]
fn report_with_no_runs_fails_cleanly() {
    let tmp = TempDir::new().unwrap();
    let conf = write_conf(tmp.path());
    let err = run_err(
        bin().args(["--config"]).arg(&conf).arg("--out").arg(tmp.path().join("empty")).arg("report"),
    );
    assert!(err.contains("no per-combination reports"), "unexpected diagnostic: {err}");
}
