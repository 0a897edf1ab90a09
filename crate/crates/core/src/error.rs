use thiserror::Error;

/// Errors raised across the model, solvers and the validation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (drift residual {drift_residual:.3e}, lyapunov residual {lyapunov_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        drift_residual: f64,
        lyapunov_residual: f64,
    },

    #[error("insufficient grid coverage: residual tail mass {residual:.3e} at the last grid point")]
    GridCoverage { residual: f64 },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn parameter<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
