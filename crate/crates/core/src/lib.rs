//! Best-of-N rollout teacher selection for on-policy distillation, on
//! tabular softmax policies and an exactly gradable arithmetic task.
//!
//! The pieces, bottom up:
//!
//! - [`vocab`] and [`task`]: token ids, task generation, answer extraction
//!   and grading.
//! - [`policy`] and [`checkpoint`]: the context-window softmax policy.
//! - [`rollout`]: trajectory sampling with per-position top-K records.
//! - [`selector`]: tiered teacher trajectory curation and catch-rate analysis.
//! - [`losses`]: student- and teacher-context KL losses with gradients.
//! - [`trainer`], [`pretrain`], [`evaluator`], [`config`]: the experiment loop.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod policy;
pub mod pretrain;
pub mod rng;
pub mod rollout;
pub mod selector;
pub mod task;
pub mod trainer;
pub mod vocab;

pub use config::{Mode, TrainConfig};
pub use error::{Error, Result};
pub use policy::{Decoding, NextTokenDist, PolicyParams, Role};
pub use rng::SeedStream;
pub use rollout::{RolloutConfig, Source, Trajectory};
pub use selector::{CatchMode, SelectionOutcome, Tier};
pub use task::{PromptVariant, TaskInstance};
