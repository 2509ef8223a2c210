use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integration error at t = {t}: {msg}")]
    Integration { t: f64, msg: String },
    #[error("sampling error at step {step}: {msg}")]
    Sampling { step: usize, msg: String },
    #[error("training error at batch index {index}: {msg}")]
    Training { index: usize, msg: String },
    #[error("inference error in cascade {cascade}: {msg}")]
    Inference { cascade: usize, msg: String },
    #[error("ingestion error in {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by invalid inputs or settings rather than by a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Contract(_) | Error::Domain(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
