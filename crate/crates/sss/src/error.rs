use std::io;
use std::path::Path;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Core(#[from] sss_core::Error),
}

impl CliError {
    pub fn config(line: usize, msg: impl Into<String>) -> Self {
        CliError::Config { line, msg: msg.into() }
    }

    pub fn usage(msg: String) -> Self {
        CliError::Usage(msg)
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for bad configuration, arguments or input files, 3 when a size
    /// guard refused the problem, 1 otherwise.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) | CliError::Format { .. } => 2,
            CliError::Core(sss_core::Error::TooLarge { .. }) => 3,
            CliError::Core(sss_core::Error::InvalidArgument(_) | sss_core::Error::Unsupported(_)) => 2,
            CliError::Io { .. } => 1,
        }
    }
}
