use thiserror::Error;

/// Errors raised by the numeric substrate, interventions and benchmarks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("percent improvement is undefined for a zero baseline")]
    UndefinedBaseline,
}

pub type Result<T> = std::result::Result<T, Error>;
