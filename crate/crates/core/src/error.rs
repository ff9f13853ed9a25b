use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("probabilities not normalized at pixel {pixel}: sum = {sum}")]
    Normalization { pixel: usize, sum: f64 },

    #[error("label {label} is not registered for the {head} head")]
    UnregisteredLabel { head: String, label: u8 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("empty evaluation: no class has a defined score")]
    EmptyEvaluation,

    #[error("{path}: unknown class id {id}")]
    UnknownClass { path: PathBuf, id: u8 },

    #[error("missing {what} for frame {id}")]
    MissingFile { what: String, id: String },

    #[error("{path}: size {found:?} does not match {expected:?}")]
    SizeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Normalization { .. } => "normalization",
            Error::UnregisteredLabel { .. } => "unregistered_label",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyEvaluation => "empty_evaluation",
            Error::UnknownClass { .. } => "unknown_class",
            Error::MissingFile { .. } => "missing_file",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}
