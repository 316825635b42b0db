//! Error types shared across the engine.

/// Errors produced by tensor operations, model construction, file formats,
/// and data ingestion.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes or dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or configuration value.
    #[error("parameter error: {0}")]
    Param(String),

    /// Value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A reduction over ground truth found no valid pixels.
    #[error("empty target: {0}")]
    EmptyTarget(String),

    /// A contract stated by an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed file contents (magic, version, truncation, manifest syntax).
    #[error("format error: {0}")]
    Format(String),

    /// A named tensor in a weight file does not match the model.
    #[error("named tensor error: {0}")]
    NamedTensor(String),

    /// Underlying I/O failure, annotated with the offending path or line.
    #[error("i/o error: {0}")]
    Io(String),

    /// Numerical failure at runtime (NaN loss, divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Contract(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
