use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    /// A non-finite value surfaced during a forward pass.
    #[error("numeric error at step {step:?}: {what}")]
    Numeric { step: Option<usize>, what: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Attach a denoising step index to a numeric error raised deeper in the stack.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric { step: None, what } => Error::Numeric {
                step: Some(step),
                what,
            },
            other => other,
        }
    }
}
