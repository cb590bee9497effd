use std::io;

use thiserror::Error;

/// Broad failure category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("point ({x}, {y}) lies outside the study region")]
    OutOfDomain { x: f64, y: f64 },

    #[error("lag {lag} outside the admissible range 1..={max_lag}")]
    LagOutOfRange { lag: i64, max_lag: u32 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate series{}: zero variance", cell.map(|c| format!(" for cell {c}")).unwrap_or_default())]
    DegenerateSeries { cell: Option<usize> },

    #[error("weight fit failed: {reason} (best sse {best_sse:.6e})")]
    FitFailed { reason: String, best_sse: f64 },

    #[error("bandwidth selection failed: {0}")]
    Bandwidth(String),

    #[error("model file version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("model file checksum failure")]
    Checksum,

    #[error("method `{method}` failed on {failed} of {total} test hours")]
    MethodAborted {
        method: String,
        failed: usize,
        total: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::VersionMismatch { .. } => ErrorCategory::Config,
            Error::Format(_)
            | Error::NoData(_)
            | Error::OutOfDomain { .. }
            | Error::InsufficientData(_)
            | Error::Checksum
            | Error::Io(_)
            | Error::Csv(_)
            | Error::LagOutOfRange { .. } => ErrorCategory::Data,
            Error::DegenerateSeries { .. }
            | Error::FitFailed { .. }
            | Error::Bandwidth(_)
            | Error::MethodAborted { .. } => ErrorCategory::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
