use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {value} at pixel {pixel} is outside [0, {classes}) and is not the ignore value")]
    Label {
        value: u8,
        pixel: usize,
        classes: usize,
    },

    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("class probabilities at pixel {pixel} sum to {sum}, expected 1")]
    Unnormalized { pixel: usize, sum: f64 },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("network has no reconstruction decoder")]
    NoReconstructionDecoder,

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: file truncated")]
    Truncated,

    #[error("checkpoint: {0}")]
    TensorTable(String),

    #[error("pnm: {0}")]
    Pnm(String),

    #[error("no evaluable classes")]
    NoEvaluableClasses,

    #[error("{0} pool is empty")]
    EmptyPool(&'static str),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::File { path, source }
    }

    /// True for errors caused by non-finite numbers (NaN/Inf) during training.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
