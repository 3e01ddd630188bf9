use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UaganError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate volume: population std {0:e} below 1e-8")]
    DegenerateVolume(f64),
    #[error("volume assembly error: {0}")]
    Assembly(String),
    #[error("training fault: non-finite {term} ({value}) at epoch {epoch}, step {step}")]
    TrainingFault { term: String, value: f64, epoch: usize, step: u64 },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{0}")]
    Runtime(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] uagan_autograd::Error),
}

pub type Result<T> = std::result::Result<T, UaganError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| UaganError::Io { path: path.into(), source })
    }
}
