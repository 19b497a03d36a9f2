use std::fmt;

/// Errors surfaced by the engine.
#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A file did not conform to its declared format.
    Format(String),
    /// Malformed or inconsistent input data (bad line, duplicate id, ...).
    Data(String),
    /// Invalid configuration or argument combination.
    Config(String),
    /// A numerical contract was violated (non-finite value, zero vector, ...).
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
