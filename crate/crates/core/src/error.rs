//! Error taxonomy shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the numerical pipeline.
///
/// Variants mirror the failure classes of the public operations: bad caller
/// input, iterative algorithms that fail to converge, matrices or point sets
/// that are too degenerate to proceed, constraint sets with no feasible
/// point, and features that are deliberately not provided.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The caller handed in something structurally invalid (shape mismatch,
    /// non-finite entries, empty splits, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A matrix is rank-deficient beyond what eigenvalue clamping can absorb.
    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    /// A point set or distribution is degenerate (identical points, zero
    /// marginal, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The constraint set of an optimization problem is empty.
    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),

    /// Requested functionality is intentionally out of scope.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Refusing to overwrite existing output without an explicit override.
    #[error("refused: {0}")]
    Refused(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI: 1 usage/invalid, 2 numerical,
    /// 3 infeasible or degenerate.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Unsupported(_) | Error::Refused(_) => 1,
            Error::NumericalFailure(_) => 2,
            Error::DegenerateMatrix(_)
            | Error::DegenerateInput(_)
            | Error::InfeasibleConstraint(_) => 3,
            Error::Io(_) | Error::Serde(_) => 1,
        }
    }
}
