use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, modes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// The finite-difference oracle cannot be trusted for this function.
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),

    /// A metric was requested on input that has nothing to measure.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Input is well-formed but the quantity is undefined for it.
    #[error("undefined input: {0}")]
    Undefined(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x})")]
    NonFinite { step: usize, batch_seed: u64 },

    /// A persisted file does not match the expected format or version.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A benchmark case produced non-equivalent outputs.
    #[error("benchmark invalid: {0}")]
    BenchInvalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
