//! One module per subcommand; each returns a finished [`RunReport`].

pub mod bench;
pub mod checks;
pub mod gen;
pub mod predict;
pub mod train;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::CliError;

/// Flags shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl Context {
    /// The command's configuration: defaults, or the JSON file overriding them.
    pub fn load<T: DeserializeOwned + Default>(&self) -> Result<T, CliError> {
        let Some(path) = &self.config else { return Ok(T::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        Ok(&self.out)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.out_dir()?.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Map a core config error to the CLI's config exit path.
pub fn config_error(path: &str, e: feat::FeatError) -> CliError {
    match e {
        feat::FeatError::Config { field, message } => CliError::Config {
            path: path.to_string(),
            message: format!("`{field}`: {message}"),
        },
        other => other.into(),
    }
}

pub fn pretty_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Internal(e.to_string()))
}
