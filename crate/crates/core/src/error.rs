//! Crate-wide error type. Variants map onto the CLI's distinct exit codes
//! (config / data / numerical / io).

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed data that violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is formally valid but degenerate (e.g. zero-energy noise).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Inconsistent or rejected configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical procedure failed (non-finite loss, singular system).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Checkpoint or dataset file is corrupt, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Adapter for `map_err` when touching a path.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
