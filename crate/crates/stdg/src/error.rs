//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or field shapes do not line up. Carries both shapes so the
    /// diagnostic names what was expected and what arrived.
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration file or key problem (unknown key, bad value, missing file).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problem (missing sample file, malformed annotation, bad manifest).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (non-finite loss, degenerate geometry, failed check).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape_mismatch(context: &str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 data, 4 numeric,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Json(_) | Error::Image(_) => 3,
            Error::Numeric(_) | Error::ShapeMismatch { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
