use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cell budget exceeded: {requested} cells requested, budget is {budget}")]
    Budget { requested: u128, budget: u64 },

    #[error("evaluation failed at {point:?}: {reason}")]
    Evaluation { point: Vec<f64>, reason: String },

    #[error("non-finite field value {value} in cell {cell:?}")]
    NonFiniteField { cell: Vec<u64>, value: f64 },

    #[error("point {point:?} leaves the transform domain")]
    DomainExit { point: Vec<f64> },

    #[error("derivative at {point:?} is not invertible (scale factor {scale})")]
    NotInvertible { point: Vec<f64>, scale: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown transform `{name}`; known transforms: {}", known.join(", "))]
    UnknownTransform { name: String, known: Vec<String> },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
