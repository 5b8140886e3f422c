use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,
    #[error("point lies behind the near plane")]
    BehindNearPlane,
    #[error("gaussian ids do not match between clouds")]
    IdMismatch,
    #[error("frame {t} out of range 1..={frames}")]
    FrameOutOfRange { t: usize, frames: usize },
    #[error("expected {expected} SH coefficients, got {got}")]
    ShCoefficientCount { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate reference depth (q90 - q10 = 0)")]
    DegenerateReferenceDepth,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: file version {found} is newer than supported version {supported}")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
