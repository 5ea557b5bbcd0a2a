//! Error surface shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("domain violation in {op}: {msg} (first offending index {index})")]
    Domain {
        op: &'static str,
        msg: String,
        index: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("architecture fingerprint mismatch: stored {stored:#018x}, expected {expected:#018x}")]
    FingerprintMismatch { stored: u64, expected: u64 },

    #[error("missing tile {0}")]
    MissingTile(u32),

    #[error("duplicate tile {0}")]
    DuplicateTile(u32),

    #[error("dataset pairing error: {0}")]
    Pairing(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("singular transform (determinant {0})")]
    SingularTransform(f64),

    #[error("image decode/encode error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            found: found.into(),
        }
    }
}
