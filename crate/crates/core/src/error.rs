use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("backward root must be scalar, got {len} elements")]
    NonScalarRoot { len: usize },

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("bad label: {0}")]
    BadLabel(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },

    #[error("missing image: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("bad synthesis spec: {0}")]
    BadSpec(String),

    #[error("crop {crop} does not fit a {height}x{width} image")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },

    #[error("ranking has no positive labels")]
    NoPositives,

    #[error("k={k} outside 1..={max}")]
    BadK { k: usize, max: usize },

    #[error("score matrices do not match: {0}")]
    MatrixMismatch(String),

    #[error("class index {index} invalid for a head with {count} outputs")]
    BadClass { index: usize, count: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("csv error at line {line}: {reason}")]
    Csv { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonScalarRoot { .. } => "NonScalarRoot",
            Error::BadConfig(_) => "BadConfig",
            Error::BadLabel(_) => "BadLabel",
            Error::MissingGradient(_) => "MissingGradient",
            Error::ParseError { .. } => "ParseError",
            Error::MissingImage(_) => "MissingImage",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::BadSpec(_) => "BadSpec",
            Error::CropTooLarge { .. } => "CropTooLarge",
            Error::NoPositives => "NoPositives",
            Error::BadK { .. } => "BadK",
            Error::MatrixMismatch(_) => "MatrixMismatch",
            Error::BadClass { .. } => "BadClass",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Image(_) => "Image",
            Error::Csv { .. } => "Csv",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    /// An I/O error annotated with the path involved.
    pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn shape(expected: impl Into<String>, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: format!("{got:?}"),
        }
    }
}
