use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("division by exact zero in {0}")]
    DivByZero(&'static str),

    #[error("log of non-positive value in {0}")]
    LogDomain(&'static str),

    #[error("singular matrix (pivot magnitude {pivot:e} below threshold) in {context}")]
    Singular { context: String, pivot: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: missing or invalid key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Prefix the location context of singularity and non-finite errors.
    pub fn within(self, location: &str) -> Self {
        match self {
            Error::Singular { context, pivot } => Error::Singular {
                context: format!("{location}: {context}"),
                pivot,
            },
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{location}: {context}"),
            },
            other => other,
        }
    }
}
