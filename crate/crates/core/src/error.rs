//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A box violated `x2 > x1 && y2 > y1` or contained non-finite coordinates.
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// A configuration value violated its documented constraint.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Matrix/grid dimensions disagree with what the operation requires.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// No heatmap was supplied for a class marked present in the image label.
    #[error("missing heatmap for class {class}")]
    MissingHeatmap { class: usize },

    /// An internal invariant that should hold by construction was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A numeric input that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, configs, arguments)
    /// as opposed to internal invariant violations.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }
}
