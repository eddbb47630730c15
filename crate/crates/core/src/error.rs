use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric parameter fell outside its admissible domain.
    #[error("parameter `{param}` out of domain: {detail}")]
    Domain { param: &'static str, detail: String },

    #[error("step index {t} outside [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("unknown condition label {0}")]
    UnknownLabel(usize),

    #[error("condition label required: {0}")]
    Conditioning(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("variances differ ({p} vs {q}); equal-covariance KL does not apply")]
    VarianceMismatch { p: f64, q: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("non-finite state at step {t}")]
    NonFinite { t: usize },

    #[error("unknown item {0}")]
    UnknownItem(u64),

    #[error("schedule fingerprint mismatch: checkpoint {checkpoint}, run {run}")]
    ScheduleMismatch { checkpoint: String, run: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(param: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            param,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
