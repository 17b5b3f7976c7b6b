use gaitgl::GaitError;
use thiserror::Error;

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] GaitError),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    /// A command ran to completion but its checks did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage, configuration and data errors, 3 for numeric aborts,
    /// 1 when a check fails.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(GaitError::NonFinite { .. }) => EXIT_NUMERIC,
            CliError::Failed(_) => EXIT_FAILED,
            _ => EXIT_USAGE,
        }
    }
}
