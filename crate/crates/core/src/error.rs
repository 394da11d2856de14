use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid codebook: {0}")]
    Codebook(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{path}: header names unknown variable '{name}'")]
    UnknownVariable { path: PathBuf, name: String },

    #[error("{path}: header is missing variable '{name}'")]
    MissingVariable { path: PathBuf, name: String },

    #[error("{path}: row {row}, column '{column}': unknown level label '{label}'")]
    UnknownLevel {
        path: PathBuf,
        row: usize,
        column: String,
        label: String,
    },

    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures raised by an imputation engine while fitting or drawing.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EngineError {
    #[error("engine does not support variable '{variable}': {levels} levels exceeds max_levels {max_levels}")]
    EngineUnsupported {
        variable: String,
        levels: usize,
        max_levels: usize,
    },

    #[error("IRLS for variable '{variable}' did not converge in {iterations} iterations (max coefficient change per iteration: {trace:?})")]
    NonConvergence {
        variable: String,
        iterations: usize,
        trace: Vec<f64>,
    },

    #[error("variable '{variable}' has fewer than two observed levels among fitting rows")]
    InsufficientLevels { variable: String },

    #[error("variable '{variable}' has no observed values")]
    NoObservedValues { variable: String },

    #[error("numerical failure for variable '{variable}': {reason}")]
    Numerical { variable: String, reason: String },
}
