//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by construction, parsing, and the numeric operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a type invariant (non-orthonormal rotation, negative
    /// focal length, label out of range, ...).
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },

    /// Array shapes disagree between operands.
    #[error("shape mismatch in {context}: {msg}")]
    ShapeMismatch { context: &'static str, msg: String },

    /// An operation received an empty input it cannot reduce over.
    #[error("{context}: no contributing elements")]
    Empty { context: &'static str },

    /// A pipeline stage violated its dimensional contract.
    #[error("pipeline stage `{stage}`: {msg}")]
    Stage { stage: &'static str, msg: String },

    /// Structured-text parse failure, with the 1-based line and the field or
    /// section being read.
    #[error("parse error at line {line} ({field}): {msg}")]
    Parse {
        line: usize,
        field: String,
        msg: String,
    },

    /// File format version not understood by this build.
    #[error("unsupported format version: expected `{expected}`, found `{found}`")]
    Version { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    /// Scene generation cannot satisfy the requested configuration.
    #[error("infeasible config: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            msg: msg.into(),
        }
    }

    pub fn shape(context: &'static str, msg: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            msg: msg.into(),
        }
    }

    pub fn parse(line: usize, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
