use thiserror::Error;

/// Errors surfaced by model construction, kernel algebra, and samplers.
#[derive(Debug, Error)]
pub enum QmhError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty state space")]
    EmptyStateSpace,

    #[error("invalid energy at index {0}: must be finite")]
    InvalidEnergy(usize),

    #[error("inverse temperature must be finite and nonnegative, got {0}")]
    InvalidBeta(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid kernel row {0}: {1}")]
    InvalidKernelRow(usize, String),

    #[error("acceptance undefined: proposal {to} from {from} has zero probability")]
    UndefinedAcceptance { from: usize, to: usize },

    #[error("state space too large: {size} exceeds limit {limit}")]
    SizeGuard { size: usize, limit: usize },

    #[error("coarse-graining class {0} has zero stationary mass")]
    EmptyClass(usize),

    #[error("embedding rejects beta = 0: internal level count diverges")]
    EmbeddingAtZeroBeta,

    #[error("trajectory too short: need at least 2 entries, got {0}")]
    TrajectoryTooShort(usize),

    #[error("impossible event: trajectory acceptance denominator vanishes")]
    ImpossibleEvent,

    #[error("invalid SPAM model: {0}")]
    InvalidSpam(String),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("quadrature failed to reach tolerance {tol} (estimate {estimate})")]
    QuadratureFailure { tol: f64, estimate: f64 },

    #[error("quantum state of dimension {0} is not normalized (norm {1})")]
    UnnormalizedState(usize, f64),

    #[error("observation trace too short for retention estimate")]
    TraceTooShort,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}
