use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("nonlinear solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("surrogate already has the maximum of {0} hidden nodes")]
    MaxNodes(usize),

    #[error("malformed surrogate record (line {line}): {reason}")]
    Parse { line: usize, reason: String },

    #[error("unsupported record version `{0}`")]
    Version(String),

    #[error("derivative window not yet filled ({have} of {need} measurements)")]
    WarmUp { have: usize, need: usize },

    #[error("empty data set")]
    EmptyData,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
