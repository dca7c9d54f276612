use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image dimensions {width}x{height} are not multiples of {multiple}")]
    Dimensions { width: usize, height: usize, multiple: usize },

    #[error("context schedule violation: {0}")]
    Schedule(String),

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("unsupported format version {0}")]
    Version(u8),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}
