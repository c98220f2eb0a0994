use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label sequence of length {labels} needs at least {required} frames, got {frames}")]
    InfeasibleAlignment { labels: usize, required: usize, frames: usize },
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint {field}: {reason}")]
    Checkpoint { field: String, reason: String },
    #[error("training diverged at step {step}: {reason} (batch dumped to {dump:?})")]
    Diverged { step: usize, reason: String, dump: Option<PathBuf> },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
