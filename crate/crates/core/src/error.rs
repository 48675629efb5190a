use std::path::PathBuf;

use cst_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("ctc: {labels} labels need {required} frames but only {frames} are available")]
    CtcInfeasible {
        labels: usize,
        required: usize,
        frames: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
