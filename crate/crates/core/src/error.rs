use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} at index {index}")]
    NotPositiveSemidefinite { eigenvalue: f64, index: usize },

    #[error("matrix is not positive definite: leading minor of order {minor} is not positive")]
    NotPositiveDefinite { minor: usize },

    #[error("record {record}: non-finite value {value}")]
    NonFiniteValue { record: usize, value: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("aggregate mismatch: {0}")]
    Mismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{discarded} of {reps} repetitions had an empty period (limit is 1%)")]
    TooManyDiscards { discarded: usize, reps: usize },

    #[error("covariance entry ({row}, {col}): {source}")]
    MatrixEntry {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the failure came from the filesystem rather than the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
