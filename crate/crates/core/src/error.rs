use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel index {index} out of range for a {rows}x{cols} frame")]
    IndexOutOfRange {
        index: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// The modelled variance `f_i + theta` is not positive at some pixel.
    #[error("nonpositive variance f + theta = {value} at pixel {pixel}")]
    NonPositiveVariance { pixel: usize, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("finite-difference step for parameter {param} crosses a constraint boundary")]
    StepAtBoundary { param: String },

    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("fit carries no covariance; refit with observed information enabled")]
    MissingCovariance,

    #[error("bead index {index} out of range for a fit with {beads} beads")]
    BeadOutOfRange { index: usize, beads: usize },

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
