use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum HtrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("attention mask blocks every key for query row {row}")]
    FullyBlockedRow { row: usize },

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("loss is empty: every target position is ignored")]
    EmptyLoss,

    #[error("undefined denominator: reference is empty")]
    EmptyReference,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error on {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("no glyph for character {0:?}")]
    MissingGlyph(char),

    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HtrError>;

impl HtrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HtrError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        HtrError::Format { path: path.into(), detail: detail.into() }
    }
}
