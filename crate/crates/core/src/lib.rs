//! Synthetic benchmark for long-tail instance detection.
//!
//! The crate simulates the second stage of a two-stage detector on worlds
//! with Zipf-distributed category frequencies: a frozen proposal generator
//! stands in for the backbone/RPN, a linear softmax head stands in for the
//! classification head, and a COCO-style evaluator reports AP per category
//! count bin. On top of that sit the interventions under study: retraining
//! the head with class-balanced sampling, combining the original and
//! retrained score matrices, repeat-factor sampling, and model ensembling.
//!
//! Everything downstream of a seed is deterministic, including file output,
//! so experiment runs can be compared byte for byte.

pub mod calib;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod heads;
pub mod scores;
pub mod twostage;
pub mod world;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: line {line}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    FileFormat { path: PathBuf, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

/// Reads a file into a string, attaching the path to any I/O error.
pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::FileIo {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes bytes to a file, attaching the path to any I/O error.
pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::FileIo {
        path: path.to_path_buf(),
        source,
    })
}
