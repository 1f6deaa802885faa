use thiserror::Error;

/// Errors raised across the library.
///
/// The CLI maps `Argument`/`Configuration`/`Unsupported` to usage failures and
/// everything numerical to a convergence/numerics failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    #[error("could not sample connected graph after {attempts} attempts")]
    GraphSampling { attempts: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("infeasible target constants: {0}")]
    InfeasibleTarget(String),

    #[error("did not converge within {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("configuration error at agent {agent}: {message}")]
    Configuration { agent: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{0}")]
    NotApplicable(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad inputs rather than by the numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_)
                | Error::Dimension { .. }
                | Error::Configuration { .. }
                | Error::Unsupported(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
