//! Library side of the `oodc` command-line tool: configuration, report
//! formats and the pipeline stages behind each subcommand.

pub mod commands;
pub mod config;
pub mod report;

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] oodcert::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub(crate) fn missing(path: &Path, e: std::io::Error) -> Self {
        CliError::Config(format!("{}: {e}", path.display()))
    }

    /// 2 for configuration and input errors, 3 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(oodcert::Error::InvalidArgument(_) | oodcert::Error::ShapeMismatch { .. }) => 2,
            CliError::Core(oodcert::Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

