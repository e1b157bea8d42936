use thiserror::Error;

/// Crate-wide error type.
///
/// Every variant maps to a stable machine-parseable class string (see
/// [`Error::class`]) which the CLI prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("format version mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable error class identifier, one token, suitable for scripting
    /// against CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::BadMagic(_) => "bad-magic",
            Error::Truncated(_) => "truncated",
            Error::CountMismatch(_) => "count-mismatch",
            Error::VersionMismatch(_) => "version-mismatch",
            Error::CorruptHeader(_) => "corrupt-header",
            Error::ArchMismatch(_) => "arch-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
