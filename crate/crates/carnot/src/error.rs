use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum CarnotError {
    /// Two values built over different group structures were combined.
    #[error("group structure mismatch: {0}")]
    StructureMismatch(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Structure constants do not define a usable step-2 group.
    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    /// An operation that needs a nonzero horizontal direction got a
    /// vertical (or zero) input.
    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    /// A scalar field evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Malformed serialized data.
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, CarnotError>;
