//! Error surface shared by the whole toolkit.
//!
//! Every message is a single line so the CLI can emit machine-parseable
//! `ERR:<category>:` prefixes without further mangling.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or axis mismatch; names both shapes where two are involved.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// An operation produced (or was handed) a NaN or infinity.
    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// A caller violated an operation's contract (empty input, non-scalar
    /// loss, label out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Data ingestion failure; the message carries row/column context.
    #[error("load error in {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    /// A checkpoint file is structurally broken.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// A checkpoint declares a version this build does not understand.
    #[error("unsupported checkpoint version: {0}")]
    Version(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Divergence {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension { op, msg: msg.into() }
    }

    pub(crate) fn dim_pair(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            msg: format!("incompatible shapes {lhs:?} vs {rhs:?}"),
        }
    }

    pub(crate) fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric { op, msg: msg.into() }
    }
}
