use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Each variant maps to a short,
/// stable reason code used by the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("lookup out of range: id {id} >= {limit}")]
    Lookup { id: usize, limit: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("graph integrity: {0}")]
    GraphIntegrity(String),
    #[error("malformed data: {0}")]
    Data(String),
    #[error("unsatisfiable dataset specification: {0}")]
    Spec(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            op,
            reason: reason.into(),
        }
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Machine-parseable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Domain { .. } => "E_DOMAIN",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Config(_) => "E_CONFIG",
            Error::Lookup { .. } => "E_LOOKUP",
            Error::Length { .. } => "E_LENGTH",
            Error::GraphIntegrity(_) => "E_GRAPH",
            Error::Data(_) => "E_DATA",
            Error::Spec(_) => "E_SPEC",
            Error::UnknownParam(_) => "E_PARAM",
            Error::Diverged(_) => "E_DIVERGED",
            Error::Usage(_) => "E_USAGE",
            Error::Parse(_) => "E_PARSE",
            Error::Io(_) => "E_IO",
            Error::Csv(_) => "E_CSV",
        }
    }
}
