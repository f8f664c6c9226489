//! Meta-learned, per-user model selection over a bank of click-through-rate
//! predictors.
//!
//! The crate is organised bottom-up:
//!
//! * [`numkit`]: checked vectors, the seeded generator, stable sigmoid/softmax/log-loss.
//! * [`data`]: fielded sparse samples, MovieLens ingestion, synthetic benchmarks,
//!   chronological per-user splits and the canonical text dump.
//! * [`models`]: LR, FM, FFM and DeepFM with analytic gradients, FTRL/Adam pretraining.
//! * [`selector`]: the MLP that maps a sample to a distribution over base models.
//! * [`meta`]: episodic meta-training with a learned per-parameter inner rate,
//!   in-task adaptation, and meta-testing.
//! * [`baselines`]: perfect oracle selectors and the trained sample-/user-level selectors.
//! * [`eval`]: AUC, log-loss, relative improvement and report exports.
//! * [`pipeline`]: end-to-end experiment orchestration used by the CLI.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dense;
pub mod eval;
pub mod meta;
pub mod models;
pub mod numkit;
pub mod pipeline;
pub mod selector;

mod error;

pub use error::{Error, Result};
