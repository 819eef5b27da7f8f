//! Shared error type for the crate.

use thiserror::Error;

/// Errors surfaced by panel construction, denoising, regression, and the
/// evaluation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes disagree (metric tables, model vs. panel, forecast vs. truth).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A value stored as present is NaN or infinite.
    #[error("non-finite value at unit {unit}, period {period}, metric {metric}")]
    NonFinite {
        unit: usize,
        period: usize,
        metric: usize,
    },

    /// A fixed-rank threshold exceeds what the donor matrix can support.
    #[error("requested rank {requested} exceeds min(N-1, K*T) = {max}")]
    RankTooLarge { requested: usize, max: usize },

    /// The SVD iteration did not converge; the input is numerically pathological.
    #[error("singular value decomposition did not converge")]
    SvdFailure,

    /// A singular value spectrum violates its precondition (empty, unsorted,
    /// or containing negative entries).
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    /// Every regression column was dropped by weighting or missing treatment data.
    #[error("no usable regression columns remain after weighting and missing-data drops")]
    NoUsableColumns,

    /// A positively weighted metric has no observed pre-intervention treatment entries.
    #[error("metric {0} has no observed pre-intervention treatment entries")]
    EmptyMetric(usize),

    /// A donor-pool restriction removed every donor.
    #[error("donor pool is empty after restriction")]
    EmptyDonorPool,

    /// The R-squared baseline has zero variance around the actuals.
    #[error("degenerate baseline: actuals coincide with the baseline everywhere")]
    DegenerateBaseline,

    /// An input file had no usable content.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Malformed manifest, config, CSV cell, or CLI argument combination.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable CLI exit code: 2 for input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SvdFailure | Error::NoUsableColumns | Error::DegenerateBaseline => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
