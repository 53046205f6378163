use reed_diffmath::MathError;
use thiserror::Error;

use crate::envsim::EnvError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite {what} ({value}) at update {update}")]
    NonFinite {
        what: &'static str,
        value: f64,
        update: u64,
    },
    #[error("preference dataset is empty")]
    EmptyDataset,
    #[error("buffer holds no contiguous window of length {len}")]
    NoFullSegment { len: usize },
    #[error("{what}: expected {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("segment {0} lacks ground-truth rewards")]
    MissingTrueReward(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
