use std::path::Path;

use feat::FeatError;
use thiserror::Error;

/// Exit-code contract shared by every subcommand.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const IO: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const USAGE: i32 = 4;
    pub const PROPERTY: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("config {path}: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("property failure: {}", .0.join(", "))]
    Property(Vec<String>),

    #[error(transparent)]
    Core(#[from] FeatError),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => exit::IO,
            CliError::Config { .. } => exit::CONFIG,
            CliError::Usage(_) => exit::USAGE,
            CliError::Property(_) => exit::PROPERTY,
            CliError::Internal(_) => exit::INTERNAL,
            CliError::Core(e) => match e {
                FeatError::Io(_) | FeatError::Format(_) => exit::IO,
                FeatError::Config { .. } | FeatError::Rank { .. } | FeatError::Json(_) => exit::CONFIG,
                FeatError::Usage(_) | FeatError::Input(_) | FeatError::Csv(_) => exit::USAGE,
                FeatError::Diverged(_) => exit::PROPERTY,
                FeatError::Dimension(_)
                | FeatError::Parameter(_)
                | FeatError::Contract(_)
                | FeatError::Generation(_) => exit::INTERNAL,
            },
        }
    }
}
