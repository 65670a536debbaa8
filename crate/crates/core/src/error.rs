use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tensor file format error: {0}")]
    Format(String),

    #[error("missing tensor `{0}` in weight bundle")]
    MissingTensor(String),

    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image decode failed for {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("unsupported report format `{0}` (supported: csv, json)")]
    UnsupportedFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape(_) => "shape",
            Error::Format(_) => "format",
            Error::MissingTensor(_) => "missing_tensor",
            Error::DegenerateFeatures(_) => "degenerate_features",
            Error::Manifest { .. } => "manifest",
            Error::Dataset(_) => "dataset",
            Error::Decode { .. } => "decode",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
