use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NumericOverflow { op: &'static str },

    #[error("training aborted at step {step}: non-finite loss (last report: {report})")]
    NumericAbort { step: usize, report: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}:{line}: {msg}")]
    DataFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown {kind} \"{name}\" (expected one of: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// CLI exit code: 2 for config/contract problems, 3 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericAbort { .. } | Error::NumericOverflow { .. } => 3,
            _ => 2,
        }
    }
}
