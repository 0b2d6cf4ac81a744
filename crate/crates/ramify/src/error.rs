use thiserror::Error;

/// Errors raised by plan construction, cost evaluation and optimization.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RamifyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("topology extraction failed: {0}")]
    Topology(String),

    #[error("degenerate configuration: zero mollified flux at midpoint {index} carrying positive mass")]
    DegenerateFlux { index: usize },

    #[error("power-law penalty singular: coincident midpoints {first} and {second}")]
    PenaltySingularity { first: usize, second: usize },

    #[error("objective not differentiable at coordinate {index}: {reason}")]
    NonDifferentiable { index: usize, reason: String },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, RamifyError>;
