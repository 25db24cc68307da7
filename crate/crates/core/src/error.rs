use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cohort too small: {got} clients, need at least {need}")]
    CohortTooSmall { got: usize, need: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("cluster of {0} clients is too small (need at least 3)")]
    ClusterTooSmall(usize),

    #[error("local training diverged for client {client}: {detail}")]
    Divergence { client: usize, detail: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("malformed input {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::MissingInput(_) => 4,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 4,
            _ => 1,
        }
    }
}
