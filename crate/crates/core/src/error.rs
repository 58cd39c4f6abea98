use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("no rows")]
    Empty,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A non-finite objective or gradient was produced. Carries the step at
    /// which it happened and the regularization in force.
    #[error("numerical failure at step {step} (eps = {eps})")]
    Numerical { step: usize, eps: f64 },

    #[error(
        "sinkhorn did not converge in {iterations} iterations (marginal error {marginal_error:e})"
    )]
    NonConvergence {
        iterations: usize,
        marginal_error: f64,
    },

    #[error("divergence undefined: {0}")]
    Support(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag, used by the CLI failure reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Empty => "empty",
            Error::Validation(_) => "validation",
            Error::Dimension(_) => "dimension",
            Error::Numerical { .. } => "numerical_failure",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Support(_) => "support",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
