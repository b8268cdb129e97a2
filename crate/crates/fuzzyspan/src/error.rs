use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("inverted span: start {start} > end {end}")]
    InvertedSpan { start: usize, end: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown token id {id} (vocab size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("unknown type id {id} (type count {count})")]
    UnknownType { id: usize, count: usize },

    #[error("corpus spec infeasible: {0}")]
    InfeasibleCorpus(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
