//! Metric-weighted least squares on the de-noised pre-intervention columns
//! and per-metric counterfactual prediction.
//!
//! Weights multiply each metric's pre-intervention columns in both the design
//! matrix and the treatment vector; a zero weight excludes the metric from
//! the fit entirely. Columns whose treatment entry is missing are dropped.
//! The coefficient vector is the minimum-norm least-squares solution via the
//! SVD pseudoinverse; no ridge term is added since the rank cut in the
//! de-noising step already controls variance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::DenoisedModel;
use crate::error::{Error, Result};
use crate::panel::FlattenedPanel;

/// Singular values below this fraction of the largest are treated as zero
/// when inverting the design matrix.
pub const SOLVER_RCOND: f64 = 1e-10;

/// Per-metric multiplicative weights for the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    w: Vec<f64>,
}

impl MetricWeights {
    /// At least one weight must be positive; all must be finite and nonnegative.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidInput("weights must be nonempty".into()));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if !w.iter().any(|x| *x > 0.0) {
            return Err(Error::InvalidInput(
                "at least one metric weight must be positive".into(),
            ));
        }
        Ok(Self { w })
    }

    /// Equal weight 1 for every metric.
    pub fn uniform(n_metrics: usize) -> Self {
        Self {
            w: vec![1.0; n_metrics],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// How the coefficient vector was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    MinNormPseudoinverse,
    /// Coefficients supplied directly (donor-pool averaging and tests).
    FixedBeta,
}

/// A fitted synthetic control for the treatment unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticControl {
    pub beta: Vec<f64>,
    pub weights: MetricWeights,
    pub retained_rank: usize,
    /// Weighted pre-intervention residual norm.
    pub fit_residual: f64,
    pub solver: Solver,
    /// Set when the model retained no singular values; beta is all zeros.
    pub degenerate: bool,
    pub t0: usize,
}

/// Per-horizon MAPE summary for one metric (filled by the evaluation stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeSummary {
    pub horizon: usize,
    /// Mean absolute percentage error over the horizon, `None` when every
    /// point was excluded for a zero actual.
    pub mape: Option<f64>,
    pub n_used: usize,
    pub n_skipped_zero_actual: usize,
}

/// Residual-bootstrap uncertainty band around the point forecast.
///
/// Exploratory add-on, not part of the core estimator: treatment
/// pre-intervention residuals are resampled within each metric, the control
/// is refitted, and pointwise percentiles are taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBand {
    pub level: f64,
    pub n_samples: usize,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

/// Per-metric counterfactual trajectories plus evaluation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub t0: usize,
    pub metric_labels: Vec<String>,
    /// K trajectories of length T.
    pub trajectories: Vec<Vec<f64>>,
    pub pre_mse: Option<Vec<f64>>,
    pub post_mse: Option<Vec<f64>>,
    pub pre_mse_mean: Option<f64>,
    pub post_mse_mean: Option<f64>,
    pub mape: Option<Vec<Vec<MapeSummary>>>,
    pub r_squared: Option<f64>,
    pub band: Option<ForecastBand>,
}

/// Minimum-norm least-squares solution of `a x ~ b` via the SVD, zeroing
/// singular values below `rcond * s_max`. Returns the solution and the
/// numerical rank used.
pub(crate) fn min_norm_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    rcond: f64,
) -> Result<(DVector<f64>, usize)> {
    let svd = crate::denoise::sorted_svd(a)?;
    let s_max = if svd.singular_values.is_empty() {
        0.0
    } else {
        svd.singular_values[0]
    };
    let tol = rcond * s_max;
    let mut x = DVector::zeros(a.ncols());
    let mut rank = 0;
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s <= tol || s == 0.0 {
            break;
        }
        rank += 1;
        let coeff = svd.u.column(i).dot(b) / s;
        x.axpy(coeff, &svd.v_t.row(i).transpose(), 1.0);
    }
    Ok((x, rank))
}

struct WeightedDesign {
    /// Rows are kept pre-intervention columns, columns are donors.
    a: DMatrix<f64>,
    b: DVector<f64>,
}

fn build_weighted_design(
    model: &DenoisedModel,
    panel: &FlattenedPanel,
    weights: &MetricWeights,
) -> Result<WeightedDesign> {
    let k = panel.n_metrics();
    let t = panel.n_periods();
    let t0 = panel.t0();
    let n_donors = panel.n_donors();

    if model.n_donors() != n_donors || model.n_metrics() != k || model.n_periods() != t {
        return Err(Error::DimensionMismatch(format!(
            "model is {}x{} over {} metrics, panel is {}x{} over {}",
            model.n_donors(),
            model.n_metrics() * model.n_periods(),
            model.n_metrics(),
            n_donors,
            k * t,
            k
        )));
    }
    if weights.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} metrics",
            weights.len(),
            k
        )));
    }

    let treatment = panel.treatment_pre();
    let mut kept: Vec<(usize, f64)> = Vec::new(); // (flat m_hat column, weighted target)
    for metric in 0..k {
        let w = weights.values()[metric];
        if w == 0.0 {
            continue;
        }
        let mut usable = 0;
        for period in 0..t0 {
            if let Some(x) = treatment[metric * t0 + period] {
                kept.push((metric * t + period, w * x));
                usable += 1;
            }
        }
        if usable == 0 {
            return Err(Error::EmptyMetric(metric));
        }
    }
    if kept.is_empty() {
        return Err(Error::NoUsableColumns);
    }

    let m_hat = model.m_hat();
    let mut a = DMatrix::zeros(kept.len(), n_donors);
    let mut b = DVector::zeros(kept.len());
    for (row, &(col, wx)) in kept.iter().enumerate() {
        let w = weights.values()[col / t];
        for d in 0..n_donors {
            a[(row, d)] = w * m_hat[(d, col)];
        }
        b[row] = wx;
    }
    Ok(WeightedDesign { a, b })
}

/// Fits the synthetic control on the de-noised pre-intervention columns.
///
/// A model that retained no singular values is not an error: the fit is
/// flagged degenerate and the coefficients are all zero.
pub fn fit(
    model: &DenoisedModel,
    panel: &FlattenedPanel,
    weights: &MetricWeights,
) -> Result<SyntheticControl> {
    let design = build_weighted_design(model, panel, weights)?;

    if model.retained_rank() == 0 {
        return Ok(SyntheticControl {
            beta: vec![0.0; panel.n_donors()],
            weights: weights.clone(),
            retained_rank: 0,
            fit_residual: design.b.norm(),
            solver: Solver::MinNormPseudoinverse,
            degenerate: true,
            t0: panel.t0(),
        });
    }

    let (beta, _) = min_norm_solve(&design.a, &design.b, SOLVER_RCOND)?;
    let fit_residual = (&design.a * &beta - &design.b).norm();
    Ok(SyntheticControl {
        beta: beta.iter().copied().collect(),
        weights: weights.clone(),
        retained_rank: model.retained_rank(),
        fit_residual,
        solver: Solver::MinNormPseudoinverse,
        degenerate: false,
        t0: panel.t0(),
    })
}

impl SyntheticControl {
    /// Wraps externally chosen coefficients (e.g. donor-pool averaging) so
    /// they can be pushed through [`predict`].
    pub fn from_beta(
        beta: Vec<f64>,
        weights: MetricWeights,
        t0: usize,
        model: &DenoisedModel,
    ) -> Self {
        Self {
            beta,
            weights,
            retained_rank: model.retained_rank(),
            fit_residual: 0.0,
            solver: Solver::FixedBeta,
            degenerate: false,
            t0,
        }
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

/// Per-metric counterfactual trajectory over all T periods:
/// `beta' * block_k`. Weights shape the fit only and are not applied here.
pub fn predict(control: &SyntheticControl, model: &DenoisedModel) -> Result<ForecastReport> {
    if control.beta.len() != model.n_donors() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries, model has {} donors",
            control.beta.len(),
            model.n_donors()
        )));
    }
    let beta = control.beta_vector();
    let trajectories = (0..model.n_metrics())
        .map(|k| {
            let row = beta.transpose() * model.block(k);
            row.iter().copied().collect()
        })
        .collect();
    Ok(ForecastReport {
        t0: control.t0,
        metric_labels: Vec::new(),
        trajectories,
        pre_mse: None,
        post_mse: None,
        pre_mse_mean: None,
        post_mse_mean: None,
        mape: None,
        r_squared: None,
        band: None,
    })
}

/// Fills pre- and post-intervention mean squared errors against per-metric
/// truth trajectories of length T, plus their across-metric means.
pub fn score(mut report: ForecastReport, truth: &[Vec<f64>]) -> Result<ForecastReport> {
    if truth.len() != report.trajectories.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} truth series for {} forecast metrics",
            truth.len(),
            report.trajectories.len()
        )));
    }
    let t0 = report.t0;
    let mut pre = Vec::with_capacity(truth.len());
    let mut post = Vec::with_capacity(truth.len());
    for (k, (forecast, actual)) in report.trajectories.iter().zip(truth).enumerate() {
        if forecast.len() != actual.len() {
            return Err(Error::DimensionMismatch(format!(
                "metric {k}: forecast length {} vs truth length {}",
                forecast.len(),
                actual.len()
            )));
        }
        let sq = |range: std::ops::Range<usize>| -> f64 {
            let n = range.len().max(1) as f64;
            range
                .map(|j| {
                    let d = forecast[j] - actual[j];
                    d * d
                })
                .sum::<f64>()
                / n
        };
        pre.push(sq(0..t0));
        post.push(sq(t0..forecast.len()));
    }
    let k = truth.len() as f64;
    report.pre_mse_mean = Some(pre.iter().sum::<f64>() / k);
    report.post_mse_mean = Some(post.iter().sum::<f64>() / k);
    report.pre_mse = Some(pre);
    report.post_mse = Some(post);
    Ok(report)
}

/// Residual-bootstrap band around the point forecast; see [`ForecastBand`].
pub fn bootstrap_band(
    control: &SyntheticControl,
    model: &DenoisedModel,
    panel: &FlattenedPanel,
    n_samples: usize,
    level: f64,
    seed: u64,
) -> Result<ForecastBand> {
    assert!(n_samples >= 2, "need at least 2 bootstrap samples");
    assert!(level > 0.0 && level < 1.0, "level must lie in (0, 1)");
    let k = panel.n_metrics();
    let t = panel.n_periods();
    let t0 = panel.t0();
    let base = predict(control, model)?;

    // Observed-minus-fitted residuals per metric over present pre entries.
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); k];
    for metric in 0..k {
        for period in 0..t0 {
            if let Some(x) = panel.treatment_pre()[metric * t0 + period] {
                residuals[metric].push(x - base.trajectories[metric][period]);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let resampled = panel.map_treatment_pre(|metric, period, _x| {
            let pool = &residuals[metric];
            let e = if pool.is_empty() {
                0.0
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            base.trajectories[metric][period] + e
        });
        // Refit against the same model; the donor side is untouched.
        let refit = fit(model, &resampled, &control.weights)?;
        samples.push(predict(&refit, model)?.trajectories);
    }

    let tail = (1.0 - level) / 2.0;
    let mut lower = vec![vec![0.0; t]; k];
    let mut upper = vec![vec![0.0; t]; k];
    for metric in 0..k {
        for period in 0..t {
            let mut vals: Vec<f64> = samples.iter().map(|s| s[metric][period]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo_idx = ((n_samples as f64 - 1.0) * tail).round() as usize;
            let hi_idx = ((n_samples as f64 - 1.0) * (1.0 - tail)).round() as usize;
            lower[metric][period] = vals[lo_idx];
            upper[metric][period] = vals[hi_idx];
        }
    }
    Ok(ForecastBand {
        level,
        n_samples,
        lower,
        upper,
    })
}
