//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor operation; names both offending shapes.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A softmax row (or an attention mask) left no valid entry.
    #[error("{op}: no valid entries remain after masking")]
    FullyMasked { op: &'static str },

    /// A token set does not fit the configured context length.
    #[error("sample {sample_id}: {needed} tokens exceed context length {context_length}")]
    Capacity {
        sample_id: String,
        needed: usize,
        context_length: usize,
    },

    /// Corpus line failed to parse against the interchange schema.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A parsed record violates a token-set invariant.
    #[error("sample {sample_id}: field {field}: {message}")]
    Validation {
        sample_id: String,
        field: String,
        message: String,
    },

    /// A caption token id falls outside the text vocabulary.
    #[error("caption token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    /// A configuration field failed its constraint.
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// An input violated a documented call contract.
    #[error("{op}: contract violation: {message}")]
    Contract { op: &'static str, message: String },

    /// A checkpoint file is malformed or does not match the expected model.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
