//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what an operation requires.
    /// `axis` names the offending axis in the operation's own vocabulary
    /// (e.g. "in_channels", "height").
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An operation was called in a way that violates its contract
    /// (non-scalar backward root, empty negative set, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration: unknown key, unparseable value, missing setting.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (CSV rows, container bytes, dates).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training diverged (non-finite loss). Carries a pointer to the last
    /// checkpoint that was still finite, when one exists.
    #[error("non-finite loss at step {step}{}", match .last_good {
        Some(p) => format!("; last good checkpoint: {p}"),
        None => String::new(),
    })]
    NonFinite { step: usize, last_good: Option<String> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dim { op, axis, expected, actual }
    }
}
