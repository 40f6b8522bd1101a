use std::path::PathBuf;

use crate::reward_dsl::{SyntaxError, ValidationError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("extent too small: {0}")]
    ExtentTooSmall(String),

    #[error("query point ({x:.3}, {y:.3}) lies outside the terrain extent")]
    OutOfBounds { x: f64, y: f64 },

    #[error("no valid spawn location found after {attempts} attempts")]
    NoValidSpawn { attempts: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Syntax(#[from] SyntaxError),

    #[error("unknown function `{name}` at line {line}, column {col}")]
    UnknownFunction { name: String, line: usize, col: usize },

    #[error("reward program failed validation: {}", format_validation(.0))]
    Validation(Vec<ValidationError>),

    #[error("non-finite loss encountered during the update")]
    NonFiniteLoss,

    #[error("simulation diverged (non-finite state)")]
    NanDetected,

    #[error("remote endpoint unreachable: {0}")]
    RemoteUnreachable(String),

    #[error("no reward program found in the response")]
    NoProgramFound,

    #[error("all {0} candidates were unparseable after repair retries")]
    AllCandidatesUnparseable(usize),

    #[error("every candidate of iteration {0} failed")]
    AllCandidatesFailed(usize),

    #[error("run interrupted after {0} completed candidates")]
    Interrupted(usize),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_validation(errors: &[ValidationError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
