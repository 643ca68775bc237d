use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum FguError {
    #[error("graph load error: {0}")]
    Load(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("non-finite loss {value} at {context}")]
    NonFinite { value: f64, context: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, FguError>;

impl FguError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FguError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        FguError::Json { path: path.as_ref().display().to_string(), source }
    }
}

/// Returns an error when `value` is NaN or infinite.
pub(crate) fn check_finite(value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(FguError::NonFinite { value, context: context() })
    }
}
