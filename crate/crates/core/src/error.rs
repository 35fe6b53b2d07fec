//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the editing laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector shape disagreement.
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not symmetric positive definite: pivot {pivot} = {value:.6e}{hint}")]
    NotSpd {
        pivot: usize,
        value: f64,
        hint: String,
    },

    /// A loss or gradient went non-finite during optimization.
    #[error("non-finite {what} at optimizer step {step}")]
    NonFinite { what: &'static str, step: usize },

    /// Token id or position outside the model's range.
    #[error("{what} out of range: {value} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    /// Token sequence longer than the model's context window.
    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceOverflow { len: usize, max_seq: usize },

    /// Subject string could not be located in the tokenized prompt.
    #[error("subject span not found after tokenization (request {request_id}): {detail}")]
    SubjectNotFound { request_id: String, detail: String },

    /// A template was malformed (placeholder count, unknown relation...).
    #[error("bad template: {0}")]
    BadTemplate(String),

    /// A config or dataset invariant was violated.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Training loss exploded past the divergence guard.
    #[error("training diverged at epoch {epoch}: loss {loss:.4} > 10x initial {initial:.4}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    /// Dataset records failed schema validation.
    #[error("{count} invalid dataset record(s):\n{report}")]
    InvalidRecords { count: usize, report: String },

    /// Checkpoint file corrupt or of an unsupported version.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
