use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("kernel evaluation failed at observation {obs}, component {component}: {source}")]
    Kernel {
        obs: usize,
        component: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("no observations")]
    NoObservations,

    #[error("unknown case id `{0}`")]
    UnknownCase(String),

    #[error("too many mixture components: {count} exceeds the hard cap {cap}")]
    TooManyComponents { count: usize, cap: usize },

    #[error("log-likelihood decreased from {before} to {after}")]
    AscentViolation { before: f64, after: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
