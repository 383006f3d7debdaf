use thiserror::Error;

use crate::model::ValidationReport;

/// Errors produced by the moment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid scenario:\n{0}")]
    InvalidScenario(ValidationReport),

    #[error("integration diverged at step {step} (t = {time}): non-finite state")]
    Divergence { step: usize, time: f64 },

    #[error("time {t} outside grid range [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("path with seed {seed:#018x} diverged at substep {step}")]
    PathDivergence { seed: u64, step: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
