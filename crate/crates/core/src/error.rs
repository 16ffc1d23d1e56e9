use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("invalid network parameters: {0}")]
    InvalidParameter(String),

    #[error("edge probability {prob} out of [0, 1] for community pair ({a}, {b})")]
    EdgeProbability { a: usize, b: usize, prob: f64 },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("fixed-point iteration did not converge from any start ({} iterations logged)", trajectory.len())]
    NonConvergence { trajectory: Vec<f64> },

    #[error("belief propagation diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("EM degenerate after {0} restarts")]
    DegenerateMixture(usize),

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl Error {
    /// Configuration-class errors map to CLI exit code 1; everything else is a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidPrior(_)
                | Error::InvalidChannel(_)
                | Error::InvalidParameter(_)
                | Error::EdgeProbability { .. }
                | Error::Config(_)
                | Error::Json(_)
                | Error::SizeGuard(_)
                | Error::Unsupported(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
