use thiserror::Error;

/// Error type shared by all pipeline modules.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration value violated an invariant; names the field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Numerical failure (degenerate normalization, NaN/Inf propagation).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Tensor shape mismatch in the autodiff kernel.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or truncated on-disk data.
    #[error("parse error: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A test-fold subject crossed into a training path.
    #[error("leakage detected: subject '{0}' from the held-out fold entered a training path")]
    Leakage(String),

    /// External verdict provider failure (network, timeout, bad status).
    #[error("verdict provider error: {0}")]
    Provider(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
