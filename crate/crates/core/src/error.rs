use std::path::PathBuf;

use crate::featurestore::StoreError;
use crate::ndgrad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: GradError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(layer: &str, source: GradError) -> Self {
        Error::Layer { layer: layer.to_string(), source }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Grad(_) | Error::Layer { .. } => "numeric",
            Error::Store(e) => e.code(),
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
