//! Benchmark harness, evaluation metrics, placebo runs, ablation
//! comparators, and hyperparameter cross-validation.
//!
//! Synthetic benchmarks score forecasts against the generator's noiseless
//! target means; placebo evaluation scores against a unit's held-out noisy
//! observations. Sweeps are paired: every comparator inside a trial sees the
//! same generated bundle, and trial seeds derive deterministically from the
//! experiment seed, so results reproduce bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::denoise::{hsvt, DenoisedModel, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::panel::{flatten, ObservationTensor, PanelSplit};
use crate::regression::{
    fit, predict, score, ForecastReport, MapeSummary, MetricWeights, SyntheticControl,
};
use crate::synth::{generate_lvm, GroundTruthBundle, LvmSpec};

/// Estimator variants compared by the harness.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Comparator {
    /// The full pipeline: concatenate, de-noise, weighted fit.
    Mrsc,
    /// Single-metric pipeline run independently per metric.
    RscPerMetric,
    /// Skips de-noising: regression directly on zero-filled observations.
    RegressionNoDenoise,
    /// Keeps de-noising but replaces the fit with the donor-pool mean.
    DonorPoolAverage,
    /// Full pipeline on donors whose label contains the given substring.
    RestrictedDonorPool { label_contains: String },
}

impl std::fmt::Display for Comparator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Comparator::Mrsc => write!(f, "mrsc"),
            Comparator::RscPerMetric => write!(f, "rsc_per_metric"),
            Comparator::RegressionNoDenoise => write!(f, "regression_no_denoise"),
            Comparator::DonorPoolAverage => write!(f, "donor_pool_average"),
            Comparator::RestrictedDonorPool { label_contains } => {
                write!(f, "restricted_donor_pool({label_contains})")
            }
        }
    }
}

/// Runs one estimator variant end to end and returns per-metric forecasts.
pub fn run_comparator(
    tensor: &ObservationTensor,
    split: &PanelSplit,
    policy: &ThresholdPolicy,
    weights: &MetricWeights,
    comparator: &Comparator,
) -> Result<ForecastReport> {
    match comparator {
        Comparator::Mrsc => {
            let panel = flatten(tensor, split)?;
            let model = hsvt(&panel, policy)?;
            let control = fit(&model, &panel, weights)?;
            let mut report = predict(&control, &model)?;
            report.metric_labels = tensor.metric_labels().to_vec();
            Ok(report)
        }
        Comparator::RscPerMetric => {
            let mut trajectories = Vec::with_capacity(tensor.n_metrics());
            for k in 0..tensor.n_metrics() {
                let sub = tensor.select_metrics(&[k]);
                let panel = flatten(&sub, split)?;
                let model = hsvt(&panel, policy)?;
                let control = fit(&model, &panel, &MetricWeights::uniform(1))?;
                let report = predict(&control, &model)?;
                trajectories.push(report.trajectories.into_iter().next().unwrap());
            }
            Ok(ForecastReport {
                t0: split.t0,
                metric_labels: tensor.metric_labels().to_vec(),
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
        Comparator::RegressionNoDenoise => {
            let panel = flatten(tensor, split)?;
            let model = DenoisedModel::passthrough(&panel);
            let control = fit(&model, &panel, weights)?;
            let mut report = predict(&control, &model)?;
            report.metric_labels = tensor.metric_labels().to_vec();
            Ok(report)
        }
        Comparator::DonorPoolAverage => {
            let panel = flatten(tensor, split)?;
            let model = hsvt(&panel, policy)?;
            let n = panel.n_donors();
            let control = SyntheticControl::from_beta(
                vec![1.0 / n as f64; n],
                weights.clone(),
                split.t0,
                &model,
            );
            let mut report = predict(&control, &model)?;
            report.metric_labels = tensor.metric_labels().to_vec();
            Ok(report)
        }
        Comparator::RestrictedDonorPool { label_contains } => {
            let mut units = vec![split.treatment_index];
            units.extend((0..tensor.n_units()).filter(|&i| {
                i != split.treatment_index && tensor.unit_labels()[i].contains(label_contains)
            }));
            if units.len() < 2 {
                return Err(Error::EmptyDonorPool);
            }
            let sub = tensor.select_units(&units);
            let sub_split = PanelSplit::new(0, split.t0);
            run_comparator(&sub, &sub_split, policy, weights, &Comparator::Mrsc)
        }
    }
}

/// How the generator's target row is drawn for each trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetCombination {
    /// The generator default: 5 nonzero Uniform(0,1) entries, sum 1.
    DefaultSparse,
    /// 5 nonzero Uniform(-0.5, 1.5) entries, not normalized. Targets built
    /// this way are far from the donor average, which is what the
    /// donor-pool-average ablation needs to be tested against.
    SparseUnnormalized,
    /// An explicit combination (length must match the donor count).
    Fixed(Vec<f64>),
}

/// Generator settings shared by every trial of an experiment; the donor
/// count and seed vary per grid point and trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_periods: usize,
    pub pool_size: usize,
    pub alphas: Vec<f64>,
    pub noise_sd: f64,
    pub share_latents: bool,
    pub target: TargetCombination,
}

impl GeneratorConfig {
    /// The two-metric benchmark generator (T = 50, pool 10, unit noise).
    pub fn paper_rmse() -> Self {
        Self {
            n_periods: 50,
            pool_size: 10,
            alphas: vec![0.7, 0.3],
            noise_sd: 1.0,
            share_latents: true,
            target: TargetCombination::DefaultSparse,
        }
    }

    fn lvm_spec(&self, n_donors: usize, seed: u64) -> LvmSpec {
        let target_combination = match &self.target {
            TargetCombination::DefaultSparse => None,
            TargetCombination::SparseUnnormalized => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 0x7a67)); 
                let nnz = n_donors.min(5);
                let idx = rand::seq::index::sample(&mut rng, n_donors, nnz).into_vec();
                let mut combo = vec![0.0; n_donors];
                for i in idx {
                    combo[i] = rng.gen::<f64>() * 2.0 - 0.5;
                }
                Some(combo)
            }
            TargetCombination::Fixed(c) => Some(c.clone()),
        };
        LvmSpec {
            n_donors,
            n_periods: self.n_periods,
            pool_size: self.pool_size,
            alphas: self.alphas.clone(),
            noise_sd: self.noise_sd,
            share_latents: self.share_latents,
            target_combination,
            seed,
        }
    }
}

/// One synthetic sweep: grids over donor counts, intervention times,
/// threshold policies, metric weights, and masking levels, with paired
/// trials across comparators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub n_grid: Vec<usize>,
    pub t0_grid: Vec<usize>,
    pub policy_grid: Vec<ThresholdPolicy>,
    pub weight_grid: Vec<Vec<f64>>,
    /// Donor observation probabilities; 1.0 means no masking. Masks at
    /// different levels within a trial share a seed and are nested.
    pub rho_grid: Vec<f64>,
    pub n_trials: usize,
    pub seed: u64,
    pub comparators: Vec<Comparator>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials < 1 {
            return Err(Error::InvalidInput("n_trials must be at least 1".into()));
        }
        for (name, empty) in [
            ("n_grid", self.n_grid.is_empty()),
            ("t0_grid", self.t0_grid.is_empty()),
            ("policy_grid", self.policy_grid.is_empty()),
            ("weight_grid", self.weight_grid.is_empty()),
            ("rho_grid", self.rho_grid.is_empty()),
            ("comparators", self.comparators.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidInput(format!("{name} must be nonempty")));
            }
        }
        if self.rho_grid.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidInput("rho values must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One comparator's scores for one metric in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub comparator: Comparator,
    pub n_donors: usize,
    pub t0: usize,
    pub policy: ThresholdPolicy,
    pub weights: Vec<f64>,
    pub rho: f64,
    pub metric: usize,
    pub pre_mse: f64,
    pub post_mse: f64,
    pub post_rmse: f64,
}

/// A comparator failure inside a sweep; recorded, never fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub comparator: Comparator,
    pub n_donors: usize,
    pub t0: usize,
    pub rho: f64,
    pub message: String,
}

/// Raw per-trial records plus the config that produced them. Aggregates are
/// always recomputed from the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub config: ExperimentConfig,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
}

/// Mean scores for one (comparator, grid point, metric) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub comparator: Comparator,
    pub n_donors: usize,
    pub t0: usize,
    pub policy: ThresholdPolicy,
    pub weights: Vec<f64>,
    pub rho: f64,
    pub metric: usize,
    pub n_trials: usize,
    pub mean_pre_mse: f64,
    pub mean_post_mse: f64,
    pub mean_post_rmse: f64,
}

fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn weights_key(w: &[f64]) -> String {
    w.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Runs the full sweep. Trials execute in parallel; output order is a
/// deterministic function of the config alone.
pub fn run_synthetic_benchmark(config: &ExperimentConfig) -> Result<BenchmarkResult> {
    config.validate()?;

    struct Cell {
        n: usize,
        t0: usize,
        policy: ThresholdPolicy,
        weights: Vec<f64>,
        rho: f64,
        trial: usize,
    }
    let mut cells = Vec::new();
    for &n in &config.n_grid {
        for &t0 in &config.t0_grid {
            for policy in &config.policy_grid {
                for weights in &config.weight_grid {
                    for &rho in &config.rho_grid {
                        for trial in 0..config.n_trials {
                            cells.push(Cell {
                                n,
                                t0,
                                policy: *policy,
                                weights: weights.clone(),
                                rho,
                                trial,
                            });
                        }
                    }
                }
            }
        }
    }

    let outputs: Vec<(Vec<TrialRecord>, Vec<TrialFailure>)> = cells
        .par_iter()
        .map(|cell| {
            let mut records = Vec::new();
            let mut failures = Vec::new();
            // The bundle seed depends on (n, trial) only, so comparators,
            // policies, weights, and masking levels all see the same data.
            let bundle_seed = splitmix(config.seed, (cell.n as u64) << 32 | cell.trial as u64);
            let spec = config.generator.lvm_spec(cell.n, bundle_seed);
            let bundle = generate_lvm(&spec);
            let truth = bundle.mean_target_rows();
            let split = bundle.split(cell.t0);
            let tensor = if cell.rho < 1.0 {
                // One mask seed per trial: masks are nested across rho.
                bundle
                    .tensor
                    .with_bernoulli_mask(cell.rho, splitmix(bundle_seed, 0x6d61736b), Some(0))
            } else {
                bundle.tensor.clone()
            };

            for comparator in &config.comparators {
                let weights = match MetricWeights::new(cell.weights.clone()) {
                    Ok(w) => w,
                    Err(e) => {
                        failures.push(TrialFailure {
                            trial: cell.trial,
                            comparator: comparator.clone(),
                            n_donors: cell.n,
                            t0: cell.t0,
                            rho: cell.rho,
                            message: e.to_string(),
                        });
                        continue;
                    }
                };
                match run_comparator(&tensor, &split, &cell.policy, &weights, comparator)
                    .and_then(|r| score(r, &truth))
                {
                    Ok(scored) => {
                        let pre = scored.pre_mse.as_ref().unwrap();
                        let post = scored.post_mse.as_ref().unwrap();
                        for metric in 0..truth.len() {
                            records.push(TrialRecord {
                                trial: cell.trial,
                                seed: bundle_seed,
                                comparator: comparator.clone(),
                                n_donors: cell.n,
                                t0: cell.t0,
                                policy: cell.policy,
                                weights: cell.weights.clone(),
                                rho: cell.rho,
                                metric,
                                pre_mse: pre[metric],
                                post_mse: post[metric],
                                post_rmse: post[metric].sqrt(),
                            });
                        }
                    }
                    Err(e) => failures.push(TrialFailure {
                        trial: cell.trial,
                        comparator: comparator.clone(),
                        n_donors: cell.n,
                        t0: cell.t0,
                        rho: cell.rho,
                        message: e.to_string(),
                    }),
                }
            }
            (records, failures)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outputs {
        records.extend(r);
        failures.extend(f);
    }
    Ok(BenchmarkResult {
        config: config.clone(),
        records,
        failures,
    })
}

impl BenchmarkResult {
    /// Per-cell means, grouped and ordered deterministically.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(String, usize, usize, String, String, String, usize), Vec<&TrialRecord>> =
            BTreeMap::new();
        for r in &self.records {
            let key = (
                r.comparator.to_string(),
                r.n_donors,
                r.t0,
                r.policy.to_string(),
                weights_key(&r.weights),
                format!("{}", r.rho),
                r.metric,
            );
            groups.entry(key).or_default().push(r);
        }
        groups
            .into_values()
            .map(|rows| {
                let n = rows.len() as f64;
                let first = rows[0];
                AggregateRow {
                    comparator: first.comparator.clone(),
                    n_donors: first.n_donors,
                    t0: first.t0,
                    policy: first.policy,
                    weights: first.weights.clone(),
                    rho: first.rho,
                    metric: first.metric,
                    n_trials: rows.len(),
                    mean_pre_mse: rows.iter().map(|r| r.pre_mse).sum::<f64>() / n,
                    mean_post_mse: rows.iter().map(|r| r.post_mse).sum::<f64>() / n,
                    mean_post_rmse: rows.iter().map(|r| r.post_rmse).sum::<f64>() / n,
                }
            })
            .collect()
    }

    /// Mean post-intervention RMSE for one comparator/n/metric cell, over
    /// all trials. `None` when the cell has no records.
    pub fn mean_post_rmse(&self, comparator: &Comparator, n_donors: usize, metric: usize) -> Option<f64> {
        let rows: Vec<&TrialRecord> = self
            .records
            .iter()
            .filter(|r| &r.comparator == comparator && r.n_donors == n_donors && r.metric == metric)
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.post_rmse).sum::<f64>() / rows.len() as f64)
    }

    /// Mean post-intervention MSE averaged over metrics for one
    /// comparator at one masking level.
    pub fn mean_post_mse_at_rho(&self, comparator: &Comparator, rho: f64) -> Option<f64> {
        let rows: Vec<&TrialRecord> = self
            .records
            .iter()
            .filter(|r| &r.comparator == comparator && r.rho == rho)
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.post_mse).sum::<f64>() / rows.len() as f64)
    }

    /// One row per trial record.
    pub fn write_raw_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "trial", "seed", "comparator", "n_donors", "t0", "policy", "weights", "rho",
            "metric", "pre_mse", "post_mse", "post_rmse",
        ])?;
        for r in &self.records {
            w.write_record([
                r.trial.to_string(),
                r.seed.to_string(),
                r.comparator.to_string(),
                r.n_donors.to_string(),
                r.t0.to_string(),
                r.policy.to_string(),
                weights_key(&r.weights),
                format!("{}", r.rho),
                r.metric.to_string(),
                format!("{}", r.pre_mse),
                format!("{}", r.post_mse),
                format!("{}", r.post_rmse),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format aggregate export: one row per (cell, statistic).
    pub fn write_plot_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "comparator", "n_donors", "t0", "policy", "weights", "rho", "metric", "stat", "value",
        ])?;
        for row in self.aggregate() {
            for (stat, value) in [
                ("mean_pre_mse", row.mean_pre_mse),
                ("mean_post_mse", row.mean_post_mse),
                ("mean_post_rmse", row.mean_post_rmse),
            ] {
                w.write_record([
                    row.comparator.to_string(),
                    row.n_donors.to_string(),
                    row.t0.to_string(),
                    row.policy.to_string(),
                    weights_key(&row.weights),
                    format!("{}", row.rho),
                    row.metric.to_string(),
                    stat.to_string(),
                    format!("{value}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Config echo, aggregates, and failures as pretty JSON.
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a ExperimentConfig,
            aggregates: Vec<AggregateRow>,
            n_records: usize,
            failures: &'a [TrialFailure],
        }
        let summary = Summary {
            config: &self.config,
            aggregates: self.aggregate(),
            n_records: self.records.len(),
            failures: &self.failures,
        };
        let mut f = std::fs::File::create(path)?;
        let mut json = serde_json::to_string_pretty(&summary)?;
        json.push('\n');
        f.write_all(json.as_bytes())?;
        Ok(())
    }
}

/// One point of the metric-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepPoint {
    pub n_metrics: usize,
    pub mean_post_mse_metric_one: f64,
}

/// Paired metric-count sweep: each trial generates a single bundle with
/// `max(ks)` metrics and slices prefixes of it, so the K = 1, 2, ... runs
/// share latents, target, and noise exactly. Scores metric one against its
/// noiseless mean.
pub fn run_k_sweep(
    generator: &GeneratorConfig,
    n_donors: usize,
    ks: &[usize],
    t0: usize,
    policy: &ThresholdPolicy,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<KSweepPoint>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k == 0 || max_k > generator.alphas.len() {
        return Err(Error::InvalidInput(format!(
            "metric counts must lie in 1..={}",
            generator.alphas.len()
        )));
    }
    let sums: Vec<f64> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let spec = generator.lvm_spec(n_donors, splitmix(seed, trial as u64));
            let bundle = generate_lvm(&spec);
            let truth = &bundle.mean_target_rows()[0];
            ks.iter()
                .map(|&k| {
                    let sub = bundle.take_metrics(k);
                    let report = run_comparator(
                        &sub.tensor,
                        &sub.split(t0),
                        policy,
                        &MetricWeights::uniform(k),
                        &Comparator::Mrsc,
                    )
                    .expect("sweep fit");
                    let f = &report.trajectories[0];
                    let n_post = (truth.len() - t0) as f64;
                    f[t0..]
                        .iter()
                        .zip(&truth[t0..])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        / n_post
                })
                .collect::<Vec<f64>>()
        })
        .reduce(
            || vec![0.0; ks.len()],
            |mut acc, v| {
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += x;
                }
                acc
            },
        );
    Ok(ks
        .iter()
        .zip(&sums)
        .map(|(&k, &s)| KSweepPoint {
            n_metrics: k,
            mean_post_mse_metric_one: s / n_trials as f64,
        })
        .collect())
}

/// Mean absolute percentage error per forecast horizon.
///
/// Horizon `h` covers the `h` periods immediately after `t0`. Points with a
/// zero actual are excluded and counted in the summary.
pub fn mape(
    forecast: &[f64],
    actual: &[f64],
    t0: usize,
    horizons: &[usize],
) -> Result<Vec<MapeSummary>> {
    if forecast.len() != actual.len() {
        return Err(Error::DimensionMismatch(format!(
            "forecast length {} vs actual length {}",
            forecast.len(),
            actual.len()
        )));
    }
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || t0 + h > actual.len() {
            return Err(Error::InvalidInput(format!(
                "horizon {h} does not fit after t0 = {t0} in {} periods",
                actual.len()
            )));
        }
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for t in t0..t0 + h {
            if actual[t] == 0.0 {
                skipped += 1;
                continue;
            }
            sum += (forecast[t] - actual[t]).abs() / actual[t].abs();
            used += 1;
        }
        out.push(MapeSummary {
            horizon: h,
            mape: (used > 0).then(|| sum / used as f64),
            n_used: used,
            n_skipped_zero_actual: skipped,
        });
    }
    Ok(out)
}

/// Coefficient of determination across units at a fixed horizon point:
/// `1 - sum((actual - forecast)^2) / sum((actual - baseline)^2)`.
pub fn r_squared(forecasts: &[f64], actuals: &[f64], baseline: &[f64]) -> Result<f64> {
    if forecasts.len() != actuals.len() || baseline.len() != actuals.len() {
        return Err(Error::DimensionMismatch(format!(
            "forecasts {}, actuals {}, baseline {}",
            forecasts.len(),
            actuals.len(),
            baseline.len()
        )));
    }
    if actuals.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 evaluation units".into(),
        ));
    }
    let ss_res: f64 = actuals
        .iter()
        .zip(forecasts)
        .map(|(a, f)| (a - f) * (a - f))
        .sum();
    let ss_base: f64 = actuals
        .iter()
        .zip(baseline)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if ss_base == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    Ok(1.0 - ss_res / ss_base)
}

/// Fits on the unit's pre-intervention data only and scores the forecast
/// against its held-out observations (skipping missing cells), the way
/// untreated units are used to validate the estimator.
pub fn placebo_evaluate(
    tensor: &ObservationTensor,
    treatment_index: usize,
    t0: usize,
    policy: &ThresholdPolicy,
    weights: &MetricWeights,
) -> Result<ForecastReport> {
    placebo_evaluate_with(tensor, treatment_index, t0, policy, weights, &Comparator::Mrsc)
}

/// [`placebo_evaluate`] under any comparator (the ablation entry point).
pub fn placebo_evaluate_with(
    tensor: &ObservationTensor,
    treatment_index: usize,
    t0: usize,
    policy: &ThresholdPolicy,
    weights: &MetricWeights,
    comparator: &Comparator,
) -> Result<ForecastReport> {
    let split = PanelSplit::new(treatment_index, t0);
    split.validate(tensor)?;
    let has_post = (0..tensor.n_metrics())
        .any(|k| (t0..tensor.n_periods()).any(|j| tensor.get(treatment_index, j, k).is_some()));
    if !has_post {
        return Err(Error::InvalidInput(format!(
            "unit {treatment_index} has no observed post-intervention data"
        )));
    }

    let report = run_comparator(tensor, &split, policy, weights, comparator)?;
    Ok(score_against_unit(report, tensor, treatment_index))
}

/// Scores a forecast against one unit's observations, skipping missing
/// cells. Used for placebo runs and for real datasets where the treatment
/// unit's post-intervention observations exist.
pub fn score_against_unit(
    mut report: ForecastReport,
    tensor: &ObservationTensor,
    unit: usize,
) -> ForecastReport {
    let t0 = report.t0;
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for k in 0..tensor.n_metrics() {
        let series = tensor.unit_series(unit, k);
        let masked_mse = |range: std::ops::Range<usize>| -> f64 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in range {
                if let Some(a) = series[j] {
                    let d = report.trajectories[k][j] - a;
                    sum += d * d;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        };
        pre.push(masked_mse(0..t0));
        post.push(masked_mse(t0..tensor.n_periods()));
    }
    let kf = tensor.n_metrics() as f64;
    report.pre_mse_mean = Some(pre.iter().sum::<f64>() / kf);
    report.post_mse_mean = Some(post.iter().sum::<f64>() / kf);
    report.pre_mse = Some(pre);
    report.post_mse = Some(post);
    report
}

/// The grid point chosen by cross-validation, with the full search table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub policy: ThresholdPolicy,
    pub weights: Vec<f64>,
    pub validation_mse: f64,
    pub retained_rank: usize,
    pub table: Vec<CvRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub policy: ThresholdPolicy,
    pub weights: Vec<f64>,
    pub validation_mse: f64,
    pub retained_rank: usize,
}

fn uniform_deviation(w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return f64::INFINITY;
    }
    let target = 1.0 / w.len() as f64;
    w.iter().map(|x| (x / total - target).powi(2)).sum::<f64>().sqrt()
}

/// Forward-chaining hyperparameter selection on the pre-intervention
/// window: fit on the first 70% of pre-intervention periods, validate on
/// the last 30% against the treatment unit's observations, and pick the
/// grid point with the lowest validation MSE averaged over metrics.
///
/// Near-exact ties (relative to the validation signal scale) break toward
/// the smaller retained rank, then toward weights closest to uniform, then
/// grid order.
pub fn cross_validate(
    tensor: &ObservationTensor,
    split: &PanelSplit,
    policy_grid: &[ThresholdPolicy],
    weight_grid: &[Vec<f64>],
) -> Result<CvSelection> {
    split.validate(tensor)?;
    if split.t0 < 4 {
        return Err(Error::InvalidInput(format!(
            "cross-validation needs t0 >= 4, got {}",
            split.t0
        )));
    }
    if policy_grid.is_empty() || weight_grid.is_empty() {
        return Err(Error::InvalidInput("grids must be nonempty".into()));
    }
    let t0 = split.t0;
    let t0_inner = ((7 * t0) / 10).max(1);
    let inner_split = PanelSplit::new(split.treatment_index, t0_inner);

    // Scale of the held-out observations, for the tie tolerance.
    let mut scale_sum = 0.0;
    let mut scale_count = 0usize;
    for k in 0..tensor.n_metrics() {
        for j in t0_inner..t0 {
            if let Some(a) = tensor.get(split.treatment_index, j, k) {
                scale_sum += a * a;
                scale_count += 1;
            }
        }
    }
    if scale_count == 0 {
        return Err(Error::InvalidInput(
            "no observed treatment values in the validation window".into(),
        ));
    }
    let tie_tolerance = 1e-10 * (scale_sum / scale_count as f64).max(1.0);

    let mut table = Vec::new();
    let mut best: Option<CvRow> = None;
    for policy in policy_grid {
        for weights in weight_grid {
            let w = MetricWeights::new(weights.clone())?;
            let panel = flatten(tensor, &inner_split)?;
            let model = hsvt(&panel, policy)?;
            let control = fit(&model, &panel, &w)?;
            let report = predict(&control, &model)?;

            let mut sum = 0.0;
            let mut count = 0usize;
            for k in 0..tensor.n_metrics() {
                for j in t0_inner..t0 {
                    if let Some(a) = tensor.get(split.treatment_index, j, k) {
                        let d = report.trajectories[k][j] - a;
                        sum += d * d;
                        count += 1;
                    }
                }
            }
            let row = CvRow {
                policy: *policy,
                weights: weights.clone(),
                validation_mse: sum / count as f64,
                retained_rank: model.retained_rank(),
            };
            let replace = match &best {
                None => true,
                Some(b) => {
                    if row.validation_mse < b.validation_mse - tie_tolerance {
                        true
                    } else if (row.validation_mse - b.validation_mse).abs() <= tie_tolerance {
                        // Tied: prefer the simpler model.
                        row.retained_rank < b.retained_rank
                            || (row.retained_rank == b.retained_rank
                                && uniform_deviation(&row.weights) + 1e-15
                                    < uniform_deviation(&b.weights))
                    } else {
                        false
                    }
                }
            };
            if replace {
                best = Some(row.clone());
            }
            table.push(row);
        }
    }
    let chosen = best.expect("nonempty grids");
    Ok(CvSelection {
        policy: chosen.policy,
        weights: chosen.weights,
        validation_mse: chosen.validation_mse,
        retained_rank: chosen.retained_rank,
        table,
    })
}

/// Convenience: run one bundle through a comparator and score against the
/// noiseless means. Used by examples and the k-sweep smoke tests.
pub fn score_against_truth(
    bundle: &GroundTruthBundle,
    t0: usize,
    policy: &ThresholdPolicy,
    weights: &MetricWeights,
    comparator: &Comparator,
) -> Result<ForecastReport> {
    let report = run_comparator(&bundle.tensor, &bundle.split(t0), policy, weights, comparator)?;
    score(report, &bundle.mean_target_rows())
}
