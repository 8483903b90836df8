use thiserror::Error;

use tabgen_core::Error as CoreError;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("usage: {0}")]
    Usage(String),
    /// Unreadable, malformed or inconsistent data (exit 2).
    #[error("data: {0}")]
    Data(String),
    /// Model or checkpoint problem (exit 3).
    #[error("model: {0}")]
    Model(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Model(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) => CliError::Usage(msg),
            CoreError::Io { .. }
            | CoreError::Parse { .. }
            | CoreError::Record { .. }
            | CoreError::HeaderMismatch(_)
            | CoreError::CellTooLong { .. }
            | CoreError::UnknownToken { .. }
            | CoreError::CoordinateOutOfRange { .. }
            | CoreError::Json(_) => CliError::Data(msg),
            _ => CliError::Model(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
