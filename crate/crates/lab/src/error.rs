use std::path::PathBuf;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] ssldetr_core::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("dataset: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("{} already holds a run manifest; pass --force to overwrite", .0.display())]
    OutputExists(PathBuf),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn json(path: impl Into<PathBuf>, err: serde_json::Error) -> Self {
        LabError::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Core(_) => "core",
            LabError::Tensor(_) => "tensor",
            LabError::Io { .. } => "io",
            LabError::Parse { .. } => "parse",
            LabError::Image { .. } => "image",
            LabError::Config { .. } => "config",
            LabError::Checkpoint { .. } => "checkpoint",
            LabError::Data(_) => "data",
            LabError::Model(_) => "model",
            LabError::OutputExists(_) => "output_exists",
        }
    }
}
