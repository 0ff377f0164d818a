//! Error type shared across the pipeline.

use std::path::PathBuf;

/// All failure modes surfaced by the library.
///
/// Variants map onto the CLI exit-code classes: `Config` exits 2,
/// `Ingestion` exits 3, `Numerical` exits 4, everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },

    #[error("point behind camera (camera-space z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),

    #[error("point ({0}, {1}, {2}) outside grid bounds")]
    OutOfDomain(f64, f64, f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a file path to bare IO/format errors when ingesting datasets.
    pub fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
