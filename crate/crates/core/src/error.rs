use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("state error: {0}")]
    State(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss: term `{term}` at epoch {epoch} evaluated to {value}")]
    NonFinite { term: &'static str, epoch: usize, value: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Label(_) => "label",
            Error::State(_) => "state",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Batch(_) => "batch",
            Error::Format(_) => "format",
            Error::Length(_) => "length",
            Error::Consistency(_) => "consistency",
            Error::Compatibility(_) => "compatibility",
            Error::Data(_) => "data",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
