use std::path::PathBuf;

use melstyle_autograd as ag;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad input data or arguments: corpus records, config values, shapes.
    #[error("{0}")]
    Validation(String),
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: u64, term: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures caused by non-finite numbers.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Numerical(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

impl From<ag::Error> for Error {
    fn from(e: ag::Error) -> Self {
        match e {
            ag::Error::NonFinite(_) | ag::Error::Singular(_) => Error::Numerical(e.to_string()),
            ag::Error::Io { path, source } => Error::Io { path, source },
            ag::Error::Stream(source) => Error::Io { path: PathBuf::new(), source },
            ag::Error::Format(detail) => Error::Format { what: "tensor", detail },
            ag::Error::Shape(_) | ag::Error::InvalidArgument(_) => Error::Validation(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
