use thiserror::Error;

/// Errors produced by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Landmark coincides with the sensor position; the measurement direction is undefined.
    #[error("degenerate geometry: landmark coincides with the sensor position")]
    DegenerateGeometry,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Residuals or Jacobians became non-finite at the point where the solver had to evaluate them.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// The RLS information matrix is not yet positive definite.
    #[error("information matrix is singular")]
    SingularInformation,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
