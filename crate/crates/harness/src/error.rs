use std::path::PathBuf;

use reed_pbrl_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("episode grids differ: {0}")]
    GridMismatch(String),
    #[error("checkpoint at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("metrics log: {0}")]
    Log(String),
    #[error("feedback channel closed before the session finished")]
    FeedbackClosed,
    #[error("could not bind feedback API: {0}")]
    Bind(std::io::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
