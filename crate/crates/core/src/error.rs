use thiserror::Error;

/// Errors raised by the lab.
#[derive(Debug, Error)]
pub enum LabError {
    /// Malformed input: bad token ids, length mismatches, out-of-range arguments.
    #[error("invalid input: {0}")]
    Input(String),
    /// A group with an empty correct or incorrect partition reached a formula
    /// that is undefined there.
    #[error("degenerate group: {0}")]
    Degenerate(String),
    /// Exhaustive enumeration would exceed the configured output cap.
    #[error("enumeration of {count} outputs exceeds the cap of {cap}")]
    EnumerationCap { count: u64, cap: u64 },
    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),
    /// A file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Input(msg.into()))
}
