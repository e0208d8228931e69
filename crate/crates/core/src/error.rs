use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KwsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("unsupported sample rate {0} Hz: only 16000 Hz input is accepted (no resampling)")]
    UnsupportedSampleRate(u32),

    #[error("unsupported wav {field}: {detail}")]
    UnsupportedWav { field: &'static str, detail: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch at layer {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label sequence of {labels} units cannot be aligned to {frames} frames")]
    Infeasible { labels: usize, frames: usize },

    #[error("brute-force enumeration of {0} paths exceeds the 1e7 bound")]
    EnumerationBound(f64),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("unknown word '{0}' (not in lexicon)")]
    UnknownWord(String),

    #[error("unknown phoneme '{0}' (not in model inventory)")]
    UnknownPhoneme(String),

    #[error("malformed {what} at line {line}: {detail}")]
    Parse {
        what: &'static str,
        line: usize,
        detail: String,
    },

    #[error("bad model file: {0}")]
    ModelFormat(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KwsError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::File {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures (diverged training) as opposed to bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, KwsError::NonFinite { .. })
    }
}
