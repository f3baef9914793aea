//! Error and result types shared across the crate.

/// Crate-wide error type.
///
/// The variants map onto the process exit codes used by the CLI:
/// config/usage problems exit 2, data problems exit 3, divergence exits 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes (or parameter/gradient shapes) do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A caller-supplied value is out of range or malformed.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration (file, preset, or flag combination) is invalid.
    #[error("invalid config: {0}")]
    Config(String),
    /// A data file is missing, truncated, or fails validation.
    #[error("data error: {0}")]
    Data(String),
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
    /// An internal invariant was violated; indicates a bug.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Divergence(_) => 4,
            Error::Shape(_) | Error::Invariant(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
