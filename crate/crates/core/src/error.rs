use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate width range: lower bound {0} leaves no room for random widths")]
    DegenerateRange(f64),

    #[error("calibration required for config {0}")]
    CalibrationRequired(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible budget: {budget} MFLOPs is below the cheapest configuration ({cheapest} MFLOPs)")]
    InfeasibleBudget { budget: f64, cheapest: f64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("ingestion error in {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to overwrite {}: pass force to replace existing artifacts", .0.display())]
    Overwrite(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::ConstraintViolation(_)
                | Error::DegenerateRange(_)
                | Error::Config(_)
                | Error::Overwrite(_)
        )
    }
}
