use thiserror::Error;

/// Errors raised by the numerical layers (integration, certificates, rates, case studies).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A user-supplied function returned a non-finite value on a stored state.
    #[error("evaluation error at index {index} (t = {time}): {message}")]
    Evaluation { index: usize, time: f64, message: String },

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("no certificate: {0}")]
    NoCertificate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
