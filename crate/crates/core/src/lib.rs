//! Group-relative policy optimization with confidence-shaped rewards on a
//! tabular autoregressive policy over synthetic verifiable arithmetic tasks.
//!
//! Modules, bottom-up:
//! - [`tasks`]: task suites and the answer verifier
//! - [`policy`]: tabular softmax policy, sampling, log-probs and gradients
//! - [`rewards`]: confidence and the reward shapers
//! - [`optim`]: group-relative advantages and the KL-regularized update
//! - [`metrics`]: per-step aggregates and CSV / JSONL output
//! - [`trainer`]: the training loop, evaluation and packaged experiments
//! - [`oracle`]: enumeration and finite-difference ground truth
//! - [`config`]: the TOML experiment config and `section.key=value` overrides

pub mod config;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rewards;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
