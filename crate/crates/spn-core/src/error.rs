//! Error type shared across the engine.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("{op}: invalid argument: {details}")]
    InvalidArgument { op: &'static str, details: String },

    #[error("graph node `{node}`: {details}")]
    Graph { node: String, details: String },

    #[error("manifest {path}: line {line}: {details}")]
    Manifest {
        path: PathBuf,
        line: usize,
        details: String,
    },

    #[error("image {path}: bad {field}: {details}")]
    ImageFormat {
        path: PathBuf,
        field: &'static str,
        details: String,
    },

    #[error("training diverged: loss not finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn invalid(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            details: details.into(),
        }
    }

    pub fn graph(node: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Graph {
            node: node.into(),
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
