use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("face at line {line} has a corner without a texture coordinate")]
    MissingUv { line: usize },

    #[error("degenerate triangle (zero area)")]
    DegenerateFace,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported spherical harmonic order {0} (only 0 and 1)")]
    UnsupportedOrder(u32),

    #[error("texel ({x}, {y}) out of range for a {size}x{size} texture")]
    OutOfRange { x: usize, y: usize, size: usize },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend returned a malformed response: {0}")]
    BackendShape(String),

    #[error("backend request {request_id} timed out after {seconds:.1} s")]
    BackendTimeout { request_id: u64, seconds: f64 },

    #[error("backend reported an error for request {request_id}: {message}")]
    BackendRemote { request_id: u64, message: String },

    #[error("backend does not support decoder pullback")]
    PullbackUnsupported,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no texel was observed by any view")]
    NoCoverage,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
