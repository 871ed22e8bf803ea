use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("batch norm needs at least 2 rows in training mode, got {0}")]
    DegenerateBatch(usize),

    #[error("insufficient points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable code used by the CLI's machine-readable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Rank { .. } | Error::DataLength { .. } => "shape",
            Error::DegenerateBatch(_) => "degenerate-batch",
            Error::InsufficientPoints { .. } => "insufficient-points",
            Error::DegenerateCloud(_) => "degenerate-cloud",
            Error::Config(_) => "config",
            Error::Label { .. } => "label",
            Error::Optimizer(_) => "optimizer",
            Error::Evaluation(_) => "evaluation",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

impl Error {
    /// Wraps an I/O error with the path it concerns.
    pub fn at_path(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
