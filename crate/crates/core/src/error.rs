use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("inner fixed point did not converge at step {step}, node {node} (last change {change:e})")]
    NumericDivergence { step: usize, node: usize, change: f64 },
    #[error("Picard iteration did not contract: {iterations} sweeps, residuals {history:?}")]
    ContractionFailure { iterations: usize, history: Vec<f64> },
    #[error("quadratic adjoint node solve diverged at step {step}, node {node}")]
    QuadraticBsdeDivergence { step: usize, node: usize },
    #[error("singular feedback denominator |1 - p*sigma_z| = {value:e} at step {step}, node {node}")]
    Singularity { step: usize, node: usize, value: f64 },
    #[error("comparison ODE blew up before t = 0 (at t = {t})")]
    NoSolution { t: f64 },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
