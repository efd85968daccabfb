//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by any pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    /// A JSONL/TSV line failed to parse.
    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },

    /// Two documents in one corpus share a doc_id.
    #[error("duplicate doc_id {doc_id:?}")]
    DuplicateDoc { doc_id: String },

    /// An edge or pair references a doc_id that is not in the corpus.
    #[error("reference to unknown doc_id {doc_id:?}")]
    DanglingDoc { doc_id: String },

    /// A pair cannot be given the requested number of negatives.
    #[error("pair {pair_id}: {needed} negatives requested but only {available} unlinked candidate documents exist")]
    NotEnoughCandidates {
        pair_id: String,
        needed: usize,
        available: usize,
    },

    /// Training produced a non-finite loss; the run has diverged.
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    /// A group index fell outside the weighted-group range.
    #[error("group index {index} out of range for {n} weighted groups")]
    GroupOutOfRange { index: usize, n: usize },

    /// A configuration value violates its documented constraint.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A precondition on an operation's inputs was violated.
    #[error("{0}")]
    InvalidInput(String),

    /// A checkpoint file is corrupt or has an unknown layout.
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
