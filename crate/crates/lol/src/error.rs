//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("capability exceeded in {op}: {detail}")]
    Capability { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Binary container parse failure. `offset` is the byte position at
    /// which the problem was detected.
    #[error("parse error at byte {offset}: {kind}")]
    Parse { kind: ParseErrorKind, offset: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    VersionMismatch { found: u32 },
    Truncated,
    ShapeOverflow,
    InvalidName,
    TrailingBytes,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic"),
            ParseErrorKind::VersionMismatch { found } => {
                write!(f, "unsupported container version {found}")
            }
            ParseErrorKind::Truncated => write!(f, "truncated payload"),
            ParseErrorKind::ShapeOverflow => write!(f, "declared shape overflows sanity bounds"),
            ParseErrorKind::InvalidName => write!(f, "layer name is not valid UTF-8"),
            ParseErrorKind::TrailingBytes => write!(f, "trailing bytes after payload"),
        }
    }
}

impl Error {
    /// Process exit code for the CLI: 0 ok, 2 usage/missing input, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::Numerical(_) => 3,
            Error::Usage(_)
            | Error::InvalidArgument { .. }
            | Error::Capability { .. }
            | Error::Shape { .. }
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::UndefinedMetric(_) => 2,
        }
    }
}
