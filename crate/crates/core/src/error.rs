use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("basis too large: {terms} terms exceeds cap {cap}")]
    BasisTooLarge { terms: u128, cap: usize },

    #[error("normal matrix is rank deficient: {deficient} of {dim} directions are numerically zero")]
    RankDeficient { deficient: usize, dim: usize },

    #[error("integration failed at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("steady state: {0}")]
    SteadyState(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss} (history: {history:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
