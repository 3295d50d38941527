use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum FeatError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("rank error: cannot build {rows} orthonormal rows in dimension {cols}")]
    Rank { rows: usize, cols: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FeatError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FeatError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FeatError>;
