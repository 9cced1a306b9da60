use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Shape(String),
    /// A value is outside the documented domain of an operation.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The finite-difference oracle could not produce a trustworthy answer.
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    /// Malformed audio, feature, or checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),
    /// Inconsistent model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Parameter trees that should match do not.
    #[error("state error: {0}")]
    State(String),
    /// A NaN or infinity escaped a computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Dataset contents violate the run configuration.
    #[error("data error: {0}")]
    Data(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::State(_) => 2,
            Error::Numeric(_) | Error::Oracle(_) => 4,
            Error::Format(_) | Error::Data(_) | Error::Checksum { .. } | Error::Io { .. } => 3,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
