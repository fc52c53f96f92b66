//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error type. Variants map one-to-one onto the failure classes
/// the library contracts name: shape conformance, numeric health,
/// caller contract violations, hard limits, and on-disk format problems.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A computation produced or consumed a NaN/Inf.
    #[error("non-finite value in {context}")]
    Numerics { context: String },

    /// A precondition stated by the API was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A hard size limit was exceeded (e.g. factorial search guard).
    #[error("limit exceeded: {0}")]
    Limit(String),

    /// A file could not be parsed; `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {what}")]
    Format { what: String, offset: u64 },

    /// A stored configuration disagrees with the caller's expectation
    /// on the named field.
    #[error("config mismatch on {field}: file has {found}, expected {expected}")]
    FormatField {
        field: &'static str,
        found: String,
        expected: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CoreError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn numerics(context: impl Into<String>) -> Self {
        CoreError::Numerics {
            context: context.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
