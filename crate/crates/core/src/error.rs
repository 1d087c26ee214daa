use thiserror::Error;

pub type Result<T> = std::result::Result<T, FbsdeError>;

#[derive(Debug, Error)]
pub enum FbsdeError {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A parameter combination that cannot produce a valid run.
    #[error("configuration error: {0}")]
    Config(String),

    /// A coefficient or driver evaluation returned a non-finite value.
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),

    #[error("implicit solver did not converge at level {level}, node {node} after {iterations} iterations (residual {residual:e})")]
    SolverDivergence {
        level: usize,
        node: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for FbsdeError {
    fn from(e: serde_json::Error) -> Self {
        FbsdeError::Serialization(e.to_string())
    }
}

impl From<csv::Error> for FbsdeError {
    fn from(e: csv::Error) -> Self {
        FbsdeError::Serialization(e.to_string())
    }
}
