use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] alan_core::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for bad data, 4 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        use alan_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::NonFinite(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

/// Inputs named on the command line must exist; a missing one is a
/// configuration error rather than a data error.
pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}
