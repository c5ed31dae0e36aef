use std::path::{Path, PathBuf};

/// Errors of the file-facing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: prostacam_core::Error,
    },
    #[error(transparent)]
    Core(#[from] prostacam_core::Error),
    #[error("empty dataset: no valid patient records under {0}")]
    EmptyDataset(PathBuf),
    #[error("duplicate patient id `{0}`")]
    DuplicateId(String),
    #[error("run stage `{0}` first")]
    MissingStage(&'static str),
    #[error("config changed since stage `{stage}` ran; rerun it")]
    ConfigChanged { stage: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
}

impl PipelineError {
    /// Machine-readable category printed by the command line.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Format { .. } => "format",
            PipelineError::Data { source, .. } => source.category(),
            PipelineError::Core(e) => e.category(),
            PipelineError::EmptyDataset(_) => "empty-dataset",
            PipelineError::DuplicateId(_) => "validation",
            PipelineError::MissingStage(_) | PipelineError::ConfigChanged { .. } => "stale",
            PipelineError::Config(_) => "config",
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        PipelineError::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    pub fn data(path: impl AsRef<Path>, source: prostacam_core::Error) -> Self {
        PipelineError::Data {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
