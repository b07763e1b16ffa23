use thiserror::Error;

/// Errors produced by model construction, estimation and the experiment harness.
#[derive(Debug, Error)]
pub enum CopeError {
    /// A probability table failed validation. Rows are never renormalized
    /// silently; a malformed table is a construction bug.
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A conditioning event has zero probability under the model.
    #[error("zero marginal probability: {0}")]
    ZeroMarginal(String),

    /// All pairwise distances in a feature-map sample are zero.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("at least two trajectories are required for a variance, got {0}")]
    InsufficientTrajectories(usize),

    /// The behavior-induced state chain failed the irreducibility check.
    #[error("behavior chain is not ergodic: {0}")]
    NotErgodic(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CopeError>;
