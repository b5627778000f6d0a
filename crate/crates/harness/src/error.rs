use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mtmamba_core::Error),

    #[error("config line {line}: {detail}")]
    ConfigLine { line: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: iteration {iter} outside 0..{total}")]
    Schedule { iter: usize, total: usize },

    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGrad(String),

    #[error("non-finite loss at iteration {iter}; last good checkpoint: {}", .last_good.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NonFiniteLoss { iter: usize, last_good: Option<PathBuf> },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
