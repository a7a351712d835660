use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numerical divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("bad magic in {field}: expected \"n+1\\0\", found {found:?}")]
    BadMagic { field: &'static str, found: [u8; 4] },

    #[error("unsupported datatype: field `datatype` = {code}")]
    UnsupportedDatatype { code: i16 },

    #[error("truncated data: expected {expected} bytes after vox_offset, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("label out of range: value {value} at voxel {index} (allowed 0..=3)")]
    LabelOutOfRange { value: f64, index: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix a divergence or other error with the auto-context iteration it came from.
    pub(crate) fn in_context_iteration(self, k: usize) -> Self {
        match self {
            Error::Divergence { iteration, detail } => Error::Divergence {
                iteration,
                detail: format!("auto-context iteration {k}: {detail}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
