//! Error type shared by every module of the engine.

use thiserror::Error;

/// All failure modes of the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent for the requested operation. The
    /// message names the operation and the offending axes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation parameter is out of its valid range.
    #[error("invalid parameter for {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    /// Input data violates a precondition (out-of-range pixels, non-binary
    /// targets, malformed interval lists, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// An operation was called in a state that does not support it
    /// (e.g. backward before any forward pass).
    #[error("invalid state: {0}")]
    State(String),

    /// A configuration value (train config, sampler mix, CLI config file)
    /// failed validation. The message enumerates every bad field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A binary container (weights, frame file) is corrupt or has an
    /// unsupported version.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Training diverged; the message carries the batch seed for replay.
    #[error("non-finite loss at epoch {epoch} step {step} (batch seed {batch_seed}): {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_seed: u64,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn param(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
