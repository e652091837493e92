use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid action {action} (allowed: {allowed})")]
    InvalidAction { action: String, allowed: String },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("replay buffer is not full ({len} of {capacity})")]
    BufferNotFull { len: usize, capacity: usize },

    #[error("integration produced a non-finite value at t = {t}")]
    NonFinite { t: f64 },

    #[error("memory window is empty at t = {t}")]
    EmptyWindow { t: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("environment episode already finished; reset before stepping")]
    EpisodeFinished,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short name for the error class, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::InvalidAction { .. } => "invalid_action",
            Error::EmptyBuffer => "empty_buffer",
            Error::BufferNotFull { .. } => "buffer_not_full",
            Error::NonFinite { .. } => "non_finite",
            Error::EmptyWindow { .. } => "empty_window",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::EpisodeFinished => "episode_finished",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

/// Rejects non-finite values.
pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite, got {value}")))
    }
}
