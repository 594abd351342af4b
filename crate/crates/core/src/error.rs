use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid grid spec: {0}")]
    Grid(String),

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("visibility mask has no visible voxels")]
    EmptyMask,

    #[error("evaluation report is empty: {0}")]
    EmptyReport(&'static str),

    #[error("cutmix needs at least two samples, got {0}")]
    TooFewSamples(usize),

    #[error("degenerate ray direction for pixel (h={h}, w={w})")]
    DegenerateRay { h: usize, w: usize },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("{0} differs between identical runs")]
    Nondeterministic(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Grid(_) | Error::Camera(_) => ErrorKind::Config,
            Error::NonFinite { .. } | Error::Nondeterministic(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
