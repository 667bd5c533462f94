use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input lies outside the domain of a transform or distribution.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model, design or tree specification is inconsistent.
    #[error("specification error: {0}")]
    Spec(String),

    /// The linear predictor at some covariate value maps outside the ratio
    /// image set (typically a cumulative model whose predictors are not
    /// increasing across equations).
    #[error("prediction domain error{}: {message}", fmt_row(*row))]
    PredictionDomain { row: Option<usize>, message: String },

    /// A numerical quantity degenerated (singular covariance, non-finite value).
    #[error("numerical error{}: {message}", fmt_row(*row))]
    Numerical { row: Option<usize>, message: String },

    /// The information matrix is rank deficient: separation or a design
    /// column that carries no information.
    #[error("identifiability error: {0}")]
    Identifiability(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn fmt_row(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" at row {r}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn at_row(self, row: usize) -> Self {
        match self {
            Error::PredictionDomain { message, .. } => Error::PredictionDomain {
                row: Some(row),
                message,
            },
            Error::Numerical { message, .. } => Error::Numerical {
                row: Some(row),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            row: None,
            message: message.into(),
        }
    }

    pub(crate) fn prediction(message: impl Into<String>) -> Self {
        Error::PredictionDomain {
            row: None,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
