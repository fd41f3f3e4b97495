use thiserror::Error;

/// Errors produced by quantizers, the wire codec, optimizers, and data
/// ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("dimension {dim} too large for brute-force oracle (max {max})")]
    OracleDimTooLarge { dim: usize, max: usize },

    #[error("corrupt code")]
    CorruptCode,

    #[error("truncated message")]
    TruncatedMessage,

    #[error("invalid scale on wire: {0}")]
    InvalidScale(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
