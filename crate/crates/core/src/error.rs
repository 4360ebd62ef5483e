use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data failed validation (shape, symmetry, binary values, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A linear-algebra step failed, typically a Cholesky factorization.
    #[error("numeric error: {message} (condition estimate {condition:.3e})")]
    Numeric { message: String, condition: f64 },

    /// A record in an input file could not be parsed or is inconsistent.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: msg.into(),
        }
    }

    /// Prefixes the message of a numeric error with extra context.
    pub(crate) fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { message, condition } => Error::Numeric {
                message: format!("{ctx}: {message}"),
                condition,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
