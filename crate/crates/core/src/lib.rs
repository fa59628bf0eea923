//! Desk-scale workbench for *priming* parameter-efficient fine-tuning.
//!
//! The pipeline has two stages. Upstream, a small encoder-decoder
//! transformer and a chosen subset of tunable elements (the full backbone,
//! soft prompts, adapters, or their meta variants) are trained over a
//! distribution of few-shot tasks — either with first-order MAML or plain
//! multi-task learning. Downstream, only prompts and/or adapters are tuned
//! per held-out task, and methods are compared by relative gain over a
//! full fine-tuning baseline (ARG / RGSTD).
//!
//! Module map:
//! - [`tensor`] / [`tape`]: dense f64 tensors and reverse-mode autodiff
//! - [`optim`]: SGD and AdamW with decoupled weight decay
//! - [`params`]: named, element-tagged parameter store
//! - [`elements`]: tunable elements and parameter partitioning
//! - [`vocab`] / [`model`]: character vocabulary and the seq2seq transformer
//! - [`checkpoint`]: flat binary parameter archives
//! - [`tasks`]: synthetic few-shot task generators and disk format
//! - [`upstream`]: MAML and multi-task upstream learning
//! - [`downstream`]: per-task fine-tuning, scoring, relative-gain metrics
//! - [`combos`]: the upstream×downstream combination matrix
//! - [`config`] / [`runner`]: run configuration and the experiment driver

pub mod error;

pub mod checkpoint;
pub mod combos;
pub mod config;
pub mod downstream;
pub mod elements;
pub mod model;
pub mod optim;
pub mod params;
pub mod runner;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod upstream;
pub mod vocab;

pub use error::{Error, Result};
