use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}:{line}: cannot parse {field} from {value:?}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        value: String,
    },

    #[error("event stream is empty")]
    EmptyStream,

    #[error("invalid split: {0}")]
    Split(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("out-of-order event: t = {t} precedes last seen t = {last}")]
    Order { t: f64, last: f64 },

    #[error("AUC is undefined when only one class is present")]
    UndefinedAuc,

    #[error("{count} edges could not be joined, first: {first}")]
    Join { count: usize, first: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
