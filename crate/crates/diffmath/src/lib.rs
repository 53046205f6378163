//! Minimal dense-tensor math for the reward, representation and policy
//! networks: row-major `f64` tensors, a recording [`Graph`] with
//! reverse-mode differentiation, Adam/SGD optimizers and a flat binary
//! checkpoint format.
//!
//! Parameters live in a [`ParamStore`]. A network only holds [`ParamId`]s
//! into its store, so two networks can share parameters by pointing at the
//! same store entries instead of copying them.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod linalg;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex, CheckpointRecord};
pub use error::MathError;
pub use graph::{Gradients, Graph, NodeId, Unary};
pub use optim::{clip_grad_norm, AdamConfig, AdamState, Optimizer, OptimizerKind, Sgd};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub type Result<T, E = MathError> = std::result::Result<T, E>;
