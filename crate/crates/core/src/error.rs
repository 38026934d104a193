use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A softmax row (or mask row) with no finite / visible entry.
    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid read schedule: {0}")]
    Schedule(String),

    #[error("invalid decision policy: {0}")]
    Policy(String),

    #[error("invalid prompt layout: {0}")]
    Layout(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cache coherence violation: {0}")]
    CacheCoherence(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("trace/layout mismatch: {0}")]
    Consistency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Policy(_) | Error::Layout(_) | Error::Schedule(_) => {
                ErrorKind::Config
            }
            Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Input(_) => ErrorKind::Data,
            Error::Shape(_)
            | Error::DegenerateRow { .. }
            | Error::EmptyInput(_)
            | Error::CacheCoherence(_)
            | Error::Consistency(_) => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
