use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt mask: {0}")]
    CorruptMask(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("invalid ring: {0}")]
    InvalidRing(String),

    /// The external backend process exited unsuccessfully.
    #[error("backend process failed (exit {code:?}): {stderr}")]
    BackendProcess { code: Option<i32>, stderr: String },

    /// The external backend produced output that violates the `.rlej` contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("average precision undefined: no ground-truth instances")]
    UndefinedAp,

    #[error("empty benchmark")]
    EmptyBenchmark,

    /// A benchmarked pipeline run failed on one input.
    #[error("{path}: {source}")]
    Pipeline {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("{path}: json: {detail}")]
    Json { path: PathBuf, detail: String },

    /// Several per-image failures collected during evaluation.
    #[error("{}", .0.iter().map(|(i, e)| format!("image {i}: {e}")).collect::<Vec<_>>().join("; "))]
    PerImage(Vec<(usize, Error)>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Json {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    /// Short machine-readable category used in `E:<code>:<detail>` diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "CONFIG",
            Error::Bounds(_) => "BOUNDS",
            Error::Shape(_) => "SHAPE",
            Error::CorruptMask(_) => "RLE",
            Error::EmptyMask => "EMPTY_MASK",
            Error::InvalidRing(_) => "RING",
            Error::BackendProcess { .. } => "BACKEND",
            Error::Protocol(_) => "PROTOCOL",
            Error::UndefinedAp => "AP",
            Error::EmptyBenchmark => "BENCH",
            Error::Pipeline { source, .. } => source.code(),
            Error::Io { .. } => "IO",
            Error::Image { .. } => "IMAGE",
            Error::Json { .. } => "JSON",
            Error::PerImage(_) => "EVAL",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
