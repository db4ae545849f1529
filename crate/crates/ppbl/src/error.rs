//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at iteration {iteration}, first offending stage {stage}")]
    NonFiniteLoss { stage: usize, iteration: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target index {index} out of range for vocab size {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("message protocol violation on stage {stage}: {detail}")]
    Protocol { stage: usize, detail: String },

    #[error("pipeline stage {stage} aborted: upstream or downstream worker failed")]
    Aborted { stage: usize },

    #[error("transport channel closed")]
    ChannelClosed,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint/architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing series: {0}")]
    MissingSeries(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape_mismatch(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }
}
