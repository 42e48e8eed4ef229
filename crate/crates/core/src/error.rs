use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("internal consistency violated: {0}")]
    Consistency(String),
    #[error("training diverged at step {step}: {message}")]
    Divergence {
        step: usize,
        message: String,
        dump: Option<PathBuf>,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Numeric(_) => "numeric",
            Error::Param(_) => "parameter",
            Error::Config(_) => "config",
            Error::UnsupportedArchitecture(_) => "unsupported-architecture",
            Error::Consistency(_) => "consistency",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Corrupt { .. } => "corrupt-file",
            Error::ParamMismatch(_) => "param-mismatch",
            Error::Dependency(_) => "dependency",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
