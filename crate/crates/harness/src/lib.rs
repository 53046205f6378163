//! Experiment harness for preference-based RL with dynamics-aware
//! reward learning: the training loop, metrics, outputs and the HTTP
//! feedback API for human teachers.

pub mod config;
mod error;
pub mod experiment;
pub mod metrics;
pub mod output;
pub mod server;

pub use config::{ExperimentConfig, RewardSource};
pub use error::{HarnessError, Result};
pub use experiment::{resolve_reward_dir, reuse_reward, run_experiment, save_checkpoint, RunOutput};
pub use metrics::{normalized_returns, reward_stability, MetricsLog};
