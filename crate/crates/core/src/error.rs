use alloc::string::String;

/// Errors raised by the core algorithms.
///
/// Variants map onto the coarse categories the command line reports
/// (`geometry`, `parameter`, `numeric`, ...), see [`Error::category`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("empty prostate mask")]
    EmptyProstateMask,
    #[error("train set empty")]
    EmptyTrainSet,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::Parameter(_) | Error::EmptyTrainSet => "parameter",
            Error::Numeric(_) | Error::Diverged { .. } => "numeric",
            Error::EmptyProstateMask | Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::IncompatibleCheckpoint(_) => "checkpoint",
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
