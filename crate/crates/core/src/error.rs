use thiserror::Error;

/// Every failure the library can report, grouped by the stage that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("view error: unknown view key `{0}`")]
    View(String),
    #[error("node error: node {0} not present")]
    Node(usize),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Broad class of the failure, used by front ends to choose exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension { .. } | Error::Numeric { .. } => ErrorKind::Numeric,
            Error::Metric(_) => ErrorKind::Metric,
            Error::Parameter(_) | Error::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
    Metric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
