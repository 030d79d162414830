use protoprompt_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Prefixes the message with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &str) -> Self {
        let tag = |m: String| format!("[{stage}] {m}");
        match self {
            Error::Contract(m) => Error::Contract(tag(m)),
            Error::Numerical(m) => Error::Numerical(tag(m)),
            Error::NotFound(m) => Error::NotFound(tag(m)),
            Error::Config(m) => Error::Config(tag(m)),
            Error::Format(m) => Error::Format(tag(m)),
            Error::UndefinedMetric(m) => Error::UndefinedMetric(tag(m)),
            Error::Io { path, source } => Error::Io {
                path: tag(path),
                source,
            },
        }
    }

    /// Process exit status: 1 config error, 2 numerical failure, 3 missing
    /// artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            Error::NotFound(_) => 3,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 1,
        }
    }
}

impl From<AutodiffError> for Error {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::Contract(m) => Error::Contract(m),
            e @ AutodiffError::NonFinite { .. } => Error::Numerical(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
