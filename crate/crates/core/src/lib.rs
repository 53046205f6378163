//! Preference-based reinforcement learning with dynamics-aware reward
//! encoders: environments, a SAC learner, the reward ensemble, the
//! auxiliary self-predictive objectives, simulated teachers and query
//! selection.

pub mod agent;
pub mod buffer;
pub mod envsim;
mod error;
pub mod query;
pub mod reed;
pub mod rewardnet;
pub mod teachers;

pub use error::{CoreError, Result};
