use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the de-raining pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: spatial size {h}x{w} must be even; pad the input to a multiple of 2 first")]
    OddSpatial { op: &'static str, h: usize, w: usize },

    #[error("maxunpool2d: corrupt pooling index {offset} at pooled position ({row}, {col}) lies outside its 2x2 window")]
    CorruptIndices { offset: usize, row: usize, col: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss {loss} at step {step} (image `{image}`)")]
    NonFiniteLoss { loss: f32, step: u64, image: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint was written for a different model configuration")]
    FingerprintMismatch { expected: String, found: String },

    #[error("image `{path}`: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, arguments, missing
    /// or unpairable data, incompatible files) rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownKey { .. }
                | Error::FingerprintMismatch { .. }
                | Error::MissingParam(_)
                | Error::Dataset(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
