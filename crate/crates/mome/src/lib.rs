//! Two-stage mixture-of-task-experts transfer learning at desk scale.
//!
//! The crate trains small task "experts" (low-rank bottlenecks parallel to
//! the feed-forward blocks of a tiny frozen encoder-decoder transformer)
//! on a set of synthetic source tasks, then adapts to a target task by
//! mixing the frozen experts through a per-layer gate driven by a
//! correlation-guided task prompt. All math runs in f64 on a reverse-mode
//! tape so every gradient can be audited against finite differences.
//!
//! Entry points:
//! - [`tensor::Tape`] / [`gradcheck::grad_check`] — the differentiation core.
//! - [`backbone::Backbone`] — the frozen encoder-decoder with FFN hooks.
//! - [`training::train_stage1`] / [`training::train_stage2`] — the two
//!   training stages.
//! - [`runner::run`] — the experiment driver behind the `mome` binary.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experts;
pub mod gating;
pub mod gradcheck;
pub mod prompts;
pub mod runner;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
