// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, interventions, training and audits.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// A configuration value violates its documented invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Two tensors or vectors disagree on a dimension.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Input values are outside the domain of an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A token id is not in the vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    UnknownToken { id: u32, vocab_size: usize },

    /// Sequence length exceeds the model context.
    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    /// Hook point outside the residual stream.
    #[error("hook {0} out of range")]
    HookOutOfRange(String),

    /// A non-finite value was encountered where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Binary container or text record could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Record-level parse failure with a 1-based line number.
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    /// A judge failed on one example of a detection set.
    #[error("judge failed on example {index}: {message}")]
    Judge { index: usize, message: String },

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Self::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap `self` with the name of the pipeline stage that produced it.
    #[must_use]
    pub fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
