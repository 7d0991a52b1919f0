use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Variants map onto the failure classes the CLI reports through its exit
/// codes: input and spec problems are usage errors, calibration failures
/// have their own code, and invariant violations are reported separately.
#[derive(Debug, Error)]
pub enum Error {
    /// A dynamics parameter or shifted value is outside its declared bounds.
    #[error("parameter `{name}` = {value} outside [{lo}, {hi}]")]
    ParameterDomain { name: String, value: f64, lo: f64, hi: f64 },

    /// Unknown parameter name for the environment.
    #[error("environment {env} has no parameter `{name}`")]
    UnknownParameter { env: String, name: String },

    /// An operation received an argument outside its domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A dimension mismatch between vectors or models.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// Invalid perturbation or condition specification.
    #[error("invalid spec: {0}")]
    Spec(String),

    /// Operation not allowed in the current lifecycle state.
    #[error("lifecycle violation: {0}")]
    Lifecycle(String),

    /// Calibration could not be performed.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// A runtime invariant was found violated.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
