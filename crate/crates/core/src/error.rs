use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("header {path}: missing key `{key}`")]
    MissingKey { path: PathBuf, key: &'static str },

    #[error("header {path}: bad value `{value}` for key `{key}`")]
    BadValue {
        path: PathBuf,
        key: &'static str,
        value: String,
    },

    #[error("unsupported element_type `{0}` (expected float32, int16 or uint8)")]
    UnsupportedElementType(String),

    #[error("payload length mismatch: header implies {expected} bytes, file has {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("value {value} at index {index} not representable as {target}")]
    NotRepresentable {
        value: f64,
        index: usize,
        target: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("dimension too small: {0}")]
    DimTooSmall(String),

    #[error("intensities not normalized: value {value} outside [0, {l_max}]")]
    NotNormalized { value: f64, l_max: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimization aborted: {0}")]
    Optimization(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
