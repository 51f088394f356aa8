use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid label distribution: {0}")]
    InvalidLabel(String),

    #[error("invalid rate matrix: {0}")]
    InvalidRateMatrix(String),

    #[error("rate matrix is reducible; stationary distribution is not unique")]
    Reducible,

    #[error("rate matrix is not reversible (detailed-balance defect {defect:e})")]
    NotReversible { defect: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "label of agent {agent} left the simplex (component {component} = {value:e}); \
         try a smaller time step"
    )]
    SimplexViolation { agent: usize, component: usize, value: f64 },

    #[error("field evaluation produced a non-finite value for agent {agent}")]
    FieldEvaluation { agent: usize },

    #[error("step-size guard failed at step {step}: tau = {tau} exceeds 1/delta = {limit}")]
    GuardFailure { step: usize, tau: f64, limit: f64 },

    #[error("proximal solver did not converge for agent {agent} at step {step}: {detail}")]
    ProxNonConvergence { step: usize, agent: usize, detail: String },

    #[error("metric tensor is near-singular: label within {margin:e} of the boundary")]
    NearSingularMetric { margin: f64 },

    #[error("geodesic optimisation failed: {0}")]
    GeodesicFailure(String),

    #[error("initial label of agent {agent} violates the margin (min component {min} < {delta})")]
    InvalidInitialDatum { agent: usize, min: f64, delta: f64 },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
