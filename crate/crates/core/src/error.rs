use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("measure has zero total mass")]
    ZeroMass,

    #[error("conditioning on a prefix with zero mass at {prefix:?}")]
    ConditioningOnNull { prefix: Vec<usize> },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid axis: {0}")]
    InvalidAxis(String),

    #[error("invalid block structure: {0}")]
    InvalidStructure(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("level {level} out of range 1..={depth}")]
    LevelOutOfRange { level: usize, depth: usize },

    #[error("heat kernel time must be positive, got {0}")]
    NonpositiveTime(f64),

    #[error("time {0} outside the admissible range")]
    TimeOutOfRange(f64),

    #[error("block marginal at level {level} depends on trailing source coordinates (deviation {deviation:e})")]
    DependenceViolation { level: usize, deviation: f64 },

    #[error("Fortet iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("conditional bridge at level {level}, prefix {prefix:?} did not converge after {iterations} iterations (residual {residual:e})")]
    PrefixNotConverged { level: usize, prefix: Vec<usize>, iterations: usize, residual: f64 },

    #[error("no positive-density selection point at level {level}, prefix {prefix:?}")]
    SelectionFailure { level: usize, prefix: Vec<usize> },

    #[error("infeasible marginals: {0}")]
    Infeasible(String),

    #[error("feasible family has an empty interior")]
    EmptyInterior,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
