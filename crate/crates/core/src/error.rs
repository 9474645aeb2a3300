use std::path::PathBuf;

use thiserror::Error;

use crate::taxonomy::TaxonomyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown dataset format `{0}`")]
    UnknownFormat(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),

    #[error("chat client: {0}")]
    Client(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("prompt exceeds token budget: {0}")]
    Budget(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Short stable tag used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::UnknownFormat(_) => "unknown_format",
            Error::Invalid(_) => "invalid",
            Error::Taxonomy(_) => "taxonomy",
            Error::Client(_) => "client",
            Error::Config(_) => "config",
            Error::Budget(_) => "budget",
            Error::NonFinite(_) => "non_finite",
            Error::Plot(_) => "plot",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &std::path::Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
