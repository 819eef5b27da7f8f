//! Multi-metric robust synthetic control.
//!
//! Given panel observations of N units over T periods across K metrics, with
//! possibly missing donor entries, this crate:
//!
//! 1. flattens the per-metric slices into one donor matrix ([`panel`]),
//! 2. de-noises it by hard singular value thresholding with missing-data
//!    rescaling ([`denoise`]),
//! 3. fits a metric-weighted linear synthetic control for the treatment unit
//!    and forecasts its counterfactual trajectory per metric ([`regression`]).
//!
//! A rank-preservation diagnostic checks whether concatenating metrics is
//! justified, a factor-model generator produces ground-truth benchmark data
//! ([`synth`]), and an evaluation harness compares the estimator against
//! single-metric and ablated variants ([`evaluation`]). File ingestion and
//! the command-line entry points live in [`ingest`] and [`cli`].

pub mod cli;
pub mod denoise;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod panel;
pub mod regression;
mod svd;
pub mod synth;

pub use error::{Error, Result};
pub use panel::{flatten, FlattenedPanel, MetricTable, ObservationTensor, PanelSplit};
