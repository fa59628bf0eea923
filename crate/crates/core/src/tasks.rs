//! Synthetic few-shot text-to-text tasks and task-split plumbing.
//!
//! Seven generator families produce small character-level tasks in a unified
//! text-to-text format: classification tasks carry exactly
//! [`SHOTS_PER_CLASS`] training examples per label, generation tasks exactly
//! [`GENERATION_SHOTS`], and every task has 32-example dev and test splits
//! with inputs pairwise disjoint across splits. Generation is deterministic
//! in `(kind, seed)`. Tasks round-trip through a CrossFit-style directory
//! layout: `train.jsonl`, `dev.jsonl`, `test.jsonl` (one
//! `{"input": …, "output": …}` object per line) plus `meta.json`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, ensure_input, Error, Result};

/// Classification tasks train on this many examples per label.
pub const SHOTS_PER_CLASS: usize = 16;
/// Generation tasks train on this many examples.
pub const GENERATION_SHOTS: usize = 32;
/// Dev and test split sizes.
pub const EVAL_SIZE: usize = 32;
/// Longest input string any generator emits (leaves prompt headroom within
/// the model's sequence budget).
pub const MAX_INPUT_CHARS: usize = 20;

/// Registered generator families.
pub const GENERATOR_FAMILIES: [&str; 7] = [
    "keyword_sentiment",
    "char_parity",
    "string_copy",
    "string_reverse",
    "marker_extraction",
    "vowel_count_bucket",
    "case_flip",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    Generation,
}

/// One few-shot task: named splits of `(input, output)` string pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub task_type: TaskType,
    pub labels: Option<Vec<String>>,
    pub train: Vec<(String, String)>,
    pub dev: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

/// Disjoint train/dev/test task-name lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train_tasks: Vec<String>,
    pub dev_tasks: Vec<String>,
    pub test_tasks: Vec<String>,
}

/// FNV-1a over the generator kind and seed: one stable stream per instance.
fn instance_rng(kind: &str, seed: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in kind.as_bytes().iter().chain(seed.to_le_bytes().iter()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn lower_string(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| (b'a' + rng.gen_range(0..10u8)) as char).collect()
}

fn mixed_case_string(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| {
            let c = b'a' + rng.gen_range(0..10u8);
            if rng.gen_bool(0.5) {
                c.to_ascii_uppercase() as char
            } else {
                c as char
            }
        })
        .collect()
}

/// Draws `n` pairs whose inputs are new to `seen` (shared across splits so
/// train/dev/test stay disjoint).
fn draw_unique<F>(
    rng: &mut ChaCha8Rng,
    n: usize,
    seen: &mut HashSet<String>,
    produce: &mut F,
) -> Vec<(String, String)>
where
    F: FnMut(&mut ChaCha8Rng) -> (String, String),
{
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (input, output) = produce(rng);
        debug_assert!(input.len() <= MAX_INPUT_CHARS, "input too long: {input:?}");
        if seen.insert(input.clone()) {
            out.push((input, output));
        }
    }
    out
}

/// Balanced variant: exactly `n / labels.len()` examples per label.
fn draw_balanced<F>(
    rng: &mut ChaCha8Rng,
    n: usize,
    labels: &[String],
    seen: &mut HashSet<String>,
    produce: &mut F,
) -> Vec<(String, String)>
where
    F: FnMut(&mut ChaCha8Rng) -> (String, String),
{
    let per = n / labels.len();
    let mut counts = vec![0usize; labels.len()];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (input, output) = produce(rng);
        debug_assert!(input.len() <= MAX_INPUT_CHARS, "input too long: {input:?}");
        let li = labels.iter().position(|l| *l == output).expect("unknown label");
        if counts[li] >= per || !seen.insert(input.clone()) {
            continue;
        }
        counts[li] += 1;
        out.push((input, output));
    }
    out
}

struct Blueprint {
    task_type: TaskType,
    labels: Option<Vec<String>>,
    produce: Box<dyn FnMut(&mut ChaCha8Rng) -> (String, String)>,
}

fn blueprint(kind: &str, rng: &mut ChaCha8Rng) -> Result<Blueprint> {
    match kind {
        "keyword_sentiment" => {
            // Per-instance keyword pair; fillers are sentiment-neutral.
            const POSITIVE: [&str; 5] = ["fine", "nice", "glad", "warm", "best"];
            const NEGATIVE: [&str; 5] = ["sad", "bad", "ugly", "cold", "hurt"];
            const FILLER: [&str; 8] = ["the", "a", "it", "was", "so", "very", "day", "all"];
            let pos = POSITIVE[rng.gen_range(0..POSITIVE.len())].to_string();
            let neg = NEGATIVE[rng.gen_range(0..NEGATIVE.len())].to_string();
            Ok(Blueprint {
                task_type: TaskType::Classification,
                labels: Some(vec!["good".into(), "bad".into()]),
                produce: Box::new(move |rng| {
                    let positive = rng.gen_bool(0.5);
                    let keyword = if positive { pos.clone() } else { neg.clone() };
                    let mut words = vec![
                        FILLER[rng.gen_range(0..FILLER.len())].to_string(),
                        FILLER[rng.gen_range(0..FILLER.len())].to_string(),
                    ];
                    words.insert(rng.gen_range(0..=words.len()), keyword);
                    let label = if positive { "good" } else { "bad" };
                    (words.join(" "), label.to_string())
                }),
            })
        }
        "char_parity" => {
            let target = (b'a' + rng.gen_range(0..10u8)) as char;
            Ok(Blueprint {
                task_type: TaskType::Classification,
                labels: Some(vec!["even".into(), "odd".into()]),
                produce: Box::new(move |rng| {
                    let len = rng.gen_range(4..=12);
                    let s = lower_string(rng, len);
                    let n = s.chars().filter(|&c| c == target).count();
                    let label = if n % 2 == 0 { "even" } else { "odd" };
                    (s, label.to_string())
                }),
            })
        }
        "string_copy" => Ok(Blueprint {
            task_type: TaskType::Generation,
            labels: None,
            produce: Box::new(|rng| {
                let len = rng.gen_range(3..=8);
                let s = lower_string(rng, len);
                (s.clone(), s)
            }),
        }),
        "string_reverse" => Ok(Blueprint {
            task_type: TaskType::Generation,
            labels: None,
            produce: Box::new(|rng| {
                let len = rng.gen_range(3..=8);
                let s = lower_string(rng, len);
                let r = s.chars().rev().collect();
                (s, r)
            }),
        }),
        "marker_extraction" => {
            const MARKERS: [char; 5] = [':', '|', '#', '>', '='];
            let marker = MARKERS[rng.gen_range(0..MARKERS.len())];
            Ok(Blueprint {
                task_type: TaskType::Generation,
                labels: None,
                produce: Box::new(move |rng| {
                    let (l_len, r_len) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
                    let left = lower_string(rng, l_len);
                    let right = lower_string(rng, r_len);
                    (format!("{left}{marker}{right}"), right)
                }),
            })
        }
        "vowel_count_bucket" => {
            let threshold = rng.gen_range(2..=3usize);
            Ok(Blueprint {
                task_type: TaskType::Classification,
                labels: Some(vec!["few".into(), "many".into()]),
                produce: Box::new(move |rng| {
                    let len = rng.gen_range(4..=12);
                    let s = lower_string(rng, len);
                    let vowels = s.chars().filter(|c| "aei".contains(*c)).count();
                    let label = if vowels <= threshold { "few" } else { "many" };
                    (s, label.to_string())
                }),
            })
        }
        "case_flip" => Ok(Blueprint {
            task_type: TaskType::Generation,
            labels: None,
            produce: Box::new(|rng| {
                let len = rng.gen_range(3..=8);
                let s = mixed_case_string(rng, len);
                let flipped = s
                    .chars()
                    .map(|c| {
                        if c.is_ascii_uppercase() {
                            c.to_ascii_lowercase()
                        } else {
                            c.to_ascii_uppercase()
                        }
                    })
                    .collect();
                (s, flipped)
            }),
        }),
        other => Err(Error::input(format!("unknown generator kind {other:?}"))),
    }
}

/// Generates one task instance, deterministic in `(kind, seed)`.
pub fn generate_task(kind: &str, seed: u64) -> Result<TaskDataset> {
    let mut rng = instance_rng(kind, seed);
    let mut bp = blueprint(kind, &mut rng)?;

    let train_size = match bp.task_type {
        TaskType::Classification => SHOTS_PER_CLASS * bp.labels.as_ref().unwrap().len(),
        TaskType::Generation => GENERATION_SHOTS,
    };
    // A shared seen-set keeps inputs disjoint across train/dev/test; each
    // split is drawn (and, for classification, balanced) independently.
    let mut seen = HashSet::new();
    let mut draw = |rng: &mut ChaCha8Rng, n: usize, seen: &mut HashSet<String>| match (&bp.task_type, &bp.labels) {
        (TaskType::Classification, Some(labels)) => {
            draw_balanced(rng, n, labels, seen, &mut bp.produce)
        }
        _ => draw_unique(rng, n, seen, &mut bp.produce),
    };
    let train = draw(&mut rng, train_size, &mut seen);
    let dev = draw(&mut rng, EVAL_SIZE, &mut seen);
    let test = draw(&mut rng, EVAL_SIZE, &mut seen);

    Ok(TaskDataset {
        name: format!("{kind}-{seed}"),
        task_type: bp.task_type,
        labels: bp.labels,
        train,
        dev,
        test,
    })
}

/// The default evaluation suite: 36 instances cycling through every family.
pub fn default_suite(seed: u64) -> Result<Vec<TaskDataset>> {
    generate_suite(seed, 36)
}

/// A suite of `n` task instances cycling through the generator families,
/// each with its own derived instance seed.
pub fn generate_suite(seed: u64, n: usize) -> Result<Vec<TaskDataset>> {
    (0..n)
        .map(|i| {
            let kind = GENERATOR_FAMILIES[i % GENERATOR_FAMILIES.len()];
            generate_task(kind, seed.wrapping_mul(1000).wrapping_add(i as u64))
        })
        .collect()
}

/// Shuffled partition of task names into train/dev/test by fractions.
pub fn random_task_split(
    all_tasks: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<TaskSplit> {
    ensure_input!(!all_tasks.is_empty(), "cannot split an empty task list");
    let sum = fractions.0 + fractions.1 + fractions.2;
    ensure_contract!(
        (sum - 1.0).abs() < 1e-9,
        "split fractions must sum to 1, got {sum}"
    );
    ensure_contract!(
        fractions.0 >= 0.0 && fractions.1 >= 0.0 && fractions.2 >= 0.0,
        "split fractions must be non-negative"
    );
    let mut names: Vec<String> = all_tasks.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..names.len()).rev() {
        let j = rng.gen_range(0..=i);
        names.swap(i, j);
    }
    let n = names.len();
    let n_train = (n as f64 * fractions.0).floor() as usize;
    let n_dev = (n as f64 * fractions.1).floor() as usize;
    let mut iter = names.into_iter();
    let train_tasks: Vec<String> = iter.by_ref().take(n_train).collect();
    let dev_tasks: Vec<String> = iter.by_ref().take(n_dev).collect();
    let test_tasks: Vec<String> = iter.collect();
    Ok(TaskSplit { train_tasks, dev_tasks, test_tasks })
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    input: String,
    output: String,
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    name: String,
    task_type: TaskType,
    labels: Option<Vec<String>>,
}

/// Validates the few-shot cardinality and disjointness invariants.
pub fn validate_dataset(task: &TaskDataset) -> Result<()> {
    match task.task_type {
        TaskType::Classification => {
            let labels = task.labels.as_ref().ok_or_else(|| {
                Error::input(format!("classification task {:?} lacks a label set", task.name))
            })?;
            for label in labels {
                let n = task.train.iter().filter(|(_, o)| o == label).count();
                ensure_input!(
                    n == SHOTS_PER_CLASS,
                    "task {:?}: label {label:?} has {n} train examples, expected {SHOTS_PER_CLASS}",
                    task.name
                );
            }
            ensure_input!(
                task.train.len() == SHOTS_PER_CLASS * labels.len(),
                "task {:?}: train size {} with labels outside the label set",
                task.name,
                task.train.len()
            );
        }
        TaskType::Generation => {
            ensure_input!(
                task.train.len() == GENERATION_SHOTS,
                "task {:?}: train size {} != {GENERATION_SHOTS}",
                task.name,
                task.train.len()
            );
        }
    }
    let mut seen = HashSet::new();
    for (split, data) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
        for (input, _) in data {
            ensure_input!(
                seen.insert(input.clone()),
                "task {:?}: input {input:?} in {split} duplicates another split",
                task.name
            );
        }
    }
    Ok(())
}

/// Writes `train/dev/test.jsonl` + `meta.json` under `dir`.
pub fn save_task_dir(task: &TaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (file, data) in [("train.jsonl", &task.train), ("dev.jsonl", &task.dev), ("test.jsonl", &task.test)] {
        let mut body = String::new();
        for (input, output) in data {
            let rec = ExampleRecord { input: input.clone(), output: output.clone() };
            body.push_str(&serde_json::to_string(&rec)?);
            body.push('\n');
        }
        fs::write(dir.join(file), body)?;
    }
    let meta = TaskMeta {
        name: task.name.clone(),
        task_type: task.task_type,
        labels: task.labels.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn load_jsonl(path: &Path) -> Result<Vec<(String, String)>> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| {
            Error::input(format!("{} line {}: malformed record: {e}", path.display(), i + 1))
        })?;
        out.push((rec.input, rec.output));
    }
    Ok(out)
}

/// Loads and validates a task directory written by [`save_task_dir`].
pub fn load_task_dir(dir: &Path) -> Result<TaskDataset> {
    let meta_path = dir.join("meta.json");
    let meta_body = fs::read_to_string(&meta_path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: TaskMeta = serde_json::from_str(&meta_body)
        .map_err(|e| Error::input(format!("{}: malformed meta: {e}", meta_path.display())))?;
    let task = TaskDataset {
        name: meta.name,
        task_type: meta.task_type,
        labels: meta.labels,
        train: load_jsonl(&dir.join("train.jsonl"))?,
        dev: load_jsonl(&dir.join("dev.jsonl"))?,
        test: load_jsonl(&dir.join("test.jsonl"))?,
    };
    validate_dataset(&task)?;
    Ok(task)
}

/// Saves a whole suite under `root/<task-name>/`.
pub fn save_suite(tasks: &[TaskDataset], root: &Path) -> Result<()> {
    for task in tasks {
        save_task_dir(task, &root.join(&task.name))?;
    }
    Ok(())
}

/// Loads every task directory under `root`, sorted by name.
pub fn load_suite(root: &Path) -> Result<Vec<TaskDataset>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    ensure_input!(!dirs.is_empty(), "no task directories under {}", root.display());
    dirs.iter().map(|d| load_task_dir(d)).collect()
}
