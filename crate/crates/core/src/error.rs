use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("DDIM inversion produced a non-finite value at rung {rung} (t = {t})")]
    InversionDiverged { rung: usize, t: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capability violation: {0}")]
    Capability(String),

    #[error("backend failure at t = {t}: {source}")]
    Backend {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend unavailable: {0}")]
    Unavailable(String),

    #[error("degenerate input in {component} for view {view}: {reason}")]
    Degenerate {
        component: &'static str,
        view: String,
        reason: String,
    },

    #[error("SGC component `{component}` failed: {source}")]
    Component {
        component: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("held-out eps-MSE {mse:.5} does not meet threshold {threshold}")]
    ThresholdNotMet { mse: f64, threshold: f64 },

    #[error("run diverged at step {step}; last good checkpoint at {checkpoint:?}")]
    RunDiverged { step: usize, checkpoint: Option<PathBuf> },

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("weights file error: {0}")]
    WeightsFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
