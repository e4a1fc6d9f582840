use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("png decode failed: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode failed: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("resize of {height}x{width} by {scale} yields an empty image")]
    DegenerateOutputSize {
        height: usize,
        width: usize,
        scale: f64,
    },

    #[error("non-finite state at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("dataset too small: need at least {needed} images, got {got}")]
    DatasetTooSmall { needed: usize, got: usize },

    #[error("negative ratio {0} requested but the negative set is empty")]
    EmptyNegativeSet(f64),

    #[error("hash mismatch for {path}: manifest has {expected}, file has {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown {kind} `{name}`; valid: {valid}")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedFormat(_)
                | Error::ShapeMismatch { .. }
                | Error::ImageTooSmall { .. }
                | Error::InvalidParameter(_)
                | Error::DegenerateOutputSize { .. }
                | Error::DatasetTooSmall { .. }
                | Error::EmptyNegativeSet(_)
                | Error::HashMismatch { .. }
                | Error::UnknownName { .. }
                | Error::Json(_)
        )
    }
}
