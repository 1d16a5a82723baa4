use std::io;

use thiserror::Error;

/// Errors raised anywhere in the retrieval engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed binary file at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate variance: {0} values are constant")]
    DegenerateVariance(&'static str),

    #[error("fp16 overflow in {block}: |{value}| exceeds the half-precision range")]
    Overflow { block: String, value: f64 },

    #[error("training diverged at step {step}: {message}")]
    Diverged {
        step: usize,
        message: String,
        last_state: Box<crate::train::TrainState>,
    },

    #[error("batch queue rejected request: {0}")]
    Rejected(String),

    #[error("evaluation engine failed: {0}")]
    Engine(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
