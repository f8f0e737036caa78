use thiserror::Error;

/// Crate-wide error type. Variants map onto the distinct CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: config/data/numeric classes get
    /// distinct codes.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Domain(_) | Error::Range(_) => 2,
            Error::Format(_) | Error::Lookup(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Geometry(_) => 4,
        }
    }
}
