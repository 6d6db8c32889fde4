use std::fmt;

/// Errors raised anywhere in the stereo pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up. `axis` names the offending axis.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    /// Input extents violate the pad-to-multiple contract.
    #[error("padding contract violated: {0}")]
    Padding(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Malformed binary or text payload; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("bad checkpoint magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    /// Input data cannot be used, e.g. a ground truth with no valid pixel.
    #[error("invalid data: {0}")]
    Data(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl fmt::Display, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit status for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
