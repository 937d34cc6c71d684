use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A numerical operation was asked to work outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// An operation was called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    /// Cache contents and mask disagree.
    #[error("consistency error: {0}")]
    Consistency(String),
    /// Malformed binary input.
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Domain(_) => "domain",
            Error::State(_) => "state",
            Error::Consistency(_) => "consistency",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }

    /// The message without the kind prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Dimension(m)
            | Error::Parameter(m)
            | Error::Domain(m)
            | Error::State(m)
            | Error::Consistency(m)
            | Error::Io(m) => m.clone(),
            Error::Format { offset, msg } => format!("offset={offset} {msg}"),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
