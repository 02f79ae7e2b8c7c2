use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the traversability pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("trajectory window [{start}, {start}+{len}] exceeds trajectory of {available} samples")]
    WindowOutOfRange {
        start: usize,
        len: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("autodiff graph error: {0}")]
    Graph(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("positive set is empty")]
    EmptyPositiveSet,

    #[error("distance set is empty")]
    EmptyDistanceSet,

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("point cloud carries no class labels")]
    MissingLabels,

    #[error("invalid world spec: {0}")]
    Spec(String),

    #[error("no traversable path: {0}")]
    NoPath(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 2,
            Error::Numeric(_)
            | Error::EmptyPositiveSet
            | Error::EmptyDistanceSet
            | Error::Graph(_)
            | Error::MissingGrad(_)
            | Error::ShapeMismatch(_)
            | Error::SizeMismatch(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
