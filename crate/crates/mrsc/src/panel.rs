//! Multi-metric panel data model.
//!
//! An [`ObservationTensor`] holds N units observed over T periods across K
//! metrics, with an explicit presence mask for missing entries. Flattening
//! concatenates the K unit-by-period slices metric-major into a single donor
//! matrix plus the treatment unit's pre-intervention vector, which is the
//! shape the denoising and regression stages operate on.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N x T x K panel of optionally missing real observations.
///
/// Storage is dense with a presence mask; layout is metric-major so each
/// unit-by-period slice is contiguous. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTensor {
    n_units: usize,
    n_periods: usize,
    n_metrics: usize,
    values: Vec<f64>,
    present: Vec<bool>,
    unit_labels: Vec<String>,
    metric_labels: Vec<String>,
}

/// One metric's tabular series: a value row per unit, one column per period.
/// `None` cells are missing observations.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub label: String,
    pub unit_labels: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

/// Treatment unit index and intervention period for a panel.
///
/// `t0` counts pre-intervention periods: periods `0..t0` are pre, `t0..T` post.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSplit {
    pub treatment_index: usize,
    pub t0: usize,
}

impl PanelSplit {
    pub fn new(treatment_index: usize, t0: usize) -> Self {
        Self {
            treatment_index,
            t0,
        }
    }

    /// Checks `treatment_index < N` and `1 <= t0 < T`.
    pub fn validate(&self, tensor: &ObservationTensor) -> Result<()> {
        if self.treatment_index >= tensor.n_units() {
            return Err(Error::InvalidInput(format!(
                "treatment index {} out of range for {} units",
                self.treatment_index,
                tensor.n_units()
            )));
        }
        if self.t0 < 1 || self.t0 >= tensor.n_periods() {
            return Err(Error::InvalidInput(format!(
                "t0 = {} must satisfy 1 <= t0 < T = {}",
                self.t0,
                tensor.n_periods()
            )));
        }
        Ok(())
    }
}

/// Source coordinates (metric, period) of one flattened column. Zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnOrigin {
    pub metric: usize,
    pub period: usize,
}

/// Donor matrix and treatment vector produced by flattening a tensor.
///
/// Donor columns run metric-major: all T periods of metric 0 first, then
/// metric 1, and so on; the treatment vector covers pre-intervention columns
/// only, in the same order. Missing donor entries hold 0.0 in `donor` and are
/// marked absent in the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedPanel {
    donor: DMatrix<f64>,
    donor_present: Vec<bool>,
    treatment_pre: Vec<Option<f64>>,
    column_map: Vec<ColumnOrigin>,
    treatment_map: Vec<ColumnOrigin>,
    n_metrics: usize,
    n_periods: usize,
    t0: usize,
    donor_unit_indices: Vec<usize>,
}

/// Observed donor fraction with the all-missing warning flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedFraction {
    /// Fraction of present donor entries, clamped to at least one entry's worth
    /// so division by it is always defined.
    pub value: f64,
    /// Set when every donor entry is missing (the clamp floor was applied).
    pub all_missing: bool,
}

impl ObservationTensor {
    /// Builds a tensor from per-metric tables.
    ///
    /// All tables must cover the same unit set (aligned by label; the first
    /// table fixes the order) and the same period count. Present values must
    /// be finite.
    pub fn from_metric_tables(tables: &[MetricTable]) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::EmptyInput("no metric tables supplied".into()));
        }
        let first = &tables[0];
        let n_units = first.unit_labels.len();
        if n_units < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 units (one treatment, one donor), got {n_units}"
            )));
        }
        let n_periods = first.rows.first().map_or(0, Vec::len);
        if n_periods == 0 {
            return Err(Error::EmptyInput(format!(
                "metric '{}' has no period columns",
                first.label
            )));
        }
        let n_metrics = tables.len();

        let mut tensor = Self::empty(
            n_units,
            n_periods,
            n_metrics,
            first.unit_labels.clone(),
            tables.iter().map(|t| t.label.clone()).collect(),
        );

        for (k, table) in tables.iter().enumerate() {
            if table.unit_labels.len() != n_units || table.rows.len() != n_units {
                return Err(Error::DimensionMismatch(format!(
                    "metric '{}' has {} units, metric '{}' has {}",
                    table.label,
                    table.unit_labels.len(),
                    first.label,
                    n_units
                )));
            }
            // Align rows to the first table's unit order.
            let order: Vec<usize> = first
                .unit_labels
                .iter()
                .map(|label| {
                    table
                        .unit_labels
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| {
                            Error::DimensionMismatch(format!(
                                "unit '{}' present in metric '{}' but not in metric '{}'",
                                label, first.label, table.label
                            ))
                        })
                })
                .collect::<Result<_>>()?;

            for (i, &src) in order.iter().enumerate() {
                let row = &table.rows[src];
                if row.len() != n_periods {
                    return Err(Error::DimensionMismatch(format!(
                        "metric '{}' unit '{}' has {} periods, expected {}",
                        table.label,
                        table.unit_labels[src],
                        row.len(),
                        n_periods
                    )));
                }
                for (j, cell) in row.iter().enumerate() {
                    if let Some(v) = cell {
                        if !v.is_finite() {
                            return Err(Error::NonFinite {
                                unit: i,
                                period: j,
                                metric: k,
                            });
                        }
                        tensor.set(i, j, k, *v);
                    }
                }
            }
        }
        Ok(tensor)
    }

    /// Builds a fully observed tensor from a closure over (unit, period, metric).
    pub fn from_fn<F>(
        n_units: usize,
        n_periods: usize,
        n_metrics: usize,
        unit_labels: Vec<String>,
        metric_labels: Vec<String>,
        mut f: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut tensor = Self::empty(n_units, n_periods, n_metrics, unit_labels, metric_labels);
        for k in 0..n_metrics {
            for i in 0..n_units {
                for j in 0..n_periods {
                    let v = f(i, j, k);
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            unit: i,
                            period: j,
                            metric: k,
                        });
                    }
                    tensor.set(i, j, k, v);
                }
            }
        }
        Ok(tensor)
    }

    fn empty(
        n_units: usize,
        n_periods: usize,
        n_metrics: usize,
        unit_labels: Vec<String>,
        metric_labels: Vec<String>,
    ) -> Self {
        let len = n_units * n_periods * n_metrics;
        Self {
            n_units,
            n_periods,
            n_metrics,
            values: vec![0.0; len],
            present: vec![false; len],
            unit_labels,
            metric_labels,
        }
    }

    #[inline]
    fn idx(&self, unit: usize, period: usize, metric: usize) -> usize {
        (metric * self.n_units + unit) * self.n_periods + period
    }

    fn set(&mut self, unit: usize, period: usize, metric: usize, value: f64) {
        let idx = self.idx(unit, period, metric);
        self.values[idx] = value;
        self.present[idx] = true;
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_metrics(&self) -> usize {
        self.n_metrics
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn metric_labels(&self) -> &[String] {
        &self.metric_labels
    }

    /// Value at (unit, period, metric), `None` when missing.
    pub fn get(&self, unit: usize, period: usize, metric: usize) -> Option<f64> {
        let idx = self.idx(unit, period, metric);
        self.present[idx].then(|| self.values[idx])
    }

    pub fn n_missing(&self) -> usize {
        self.present.iter().filter(|&&p| !p).count()
    }

    /// Unit index for a display label.
    pub fn unit_index(&self, label: &str) -> Option<usize> {
        self.unit_labels.iter().position(|l| l == label)
    }

    /// One metric's N x T slice with missing entries zero-filled.
    pub fn zero_filled_slice(&self, metric: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_units, self.n_periods, |i, j| {
            self.get(i, j, metric).unwrap_or(0.0)
        })
    }

    /// One unit's full trajectory for a metric, `None` where missing.
    pub fn unit_series(&self, unit: usize, metric: usize) -> Vec<Option<f64>> {
        (0..self.n_periods).map(|j| self.get(unit, j, metric)).collect()
    }

    /// Sub-tensor keeping the first `k` metrics.
    pub fn take_metrics(&self, k: usize) -> Self {
        assert!(k >= 1 && k <= self.n_metrics, "metric count out of range");
        self.select_metrics(&(0..k).collect::<Vec<_>>())
    }

    /// Sub-tensor with exactly the given metrics, in the given order.
    pub fn select_metrics(&self, metrics: &[usize]) -> Self {
        let mut out = Self::empty(
            self.n_units,
            self.n_periods,
            metrics.len(),
            self.unit_labels.clone(),
            metrics.iter().map(|&m| self.metric_labels[m].clone()).collect(),
        );
        for (k_new, &k_old) in metrics.iter().enumerate() {
            for i in 0..self.n_units {
                for j in 0..self.n_periods {
                    if let Some(v) = self.get(i, j, k_old) {
                        out.set(i, j, k_new, v);
                    }
                }
            }
        }
        out
    }

    /// Sub-tensor with exactly the given units, in the given order.
    pub fn select_units(&self, units: &[usize]) -> Self {
        let mut out = Self::empty(
            units.len(),
            self.n_periods,
            self.n_metrics,
            units.iter().map(|&u| self.unit_labels[u].clone()).collect(),
            self.metric_labels.clone(),
        );
        for k in 0..self.n_metrics {
            for (i_new, &i_old) in units.iter().enumerate() {
                for j in 0..self.n_periods {
                    if let Some(v) = self.get(i_old, j, k) {
                        out.set(i_new, j, k, v);
                    }
                }
            }
        }
        out
    }

    /// Independently drops each entry with probability `1 - rho`, excluding
    /// the protected unit (typically the treatment row, which the model keeps
    /// fully observed).
    pub fn with_bernoulli_mask(&self, rho: f64, seed: u64, protect_unit: Option<usize>) -> Self {
        assert!((0.0..=1.0).contains(&rho), "rho must lie in [0, 1]");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for k in 0..self.n_metrics {
            for i in 0..self.n_units {
                for j in 0..self.n_periods {
                    let keep = rng.gen::<f64>() < rho;
                    if Some(i) == protect_unit {
                        continue;
                    }
                    if !keep {
                        let idx = out.idx(i, j, k);
                        out.present[idx] = false;
                        out.values[idx] = 0.0;
                    }
                }
            }
        }
        out
    }
}

/// Flattens a tensor into the donor matrix and pre-intervention treatment
/// vector for the given split.
///
/// Donor entry `(i, k*T + j)` equals the tensor value at (donor unit i,
/// period j, metric k); the treatment vector covers `j < t0` in the same
/// metric-major order.
pub fn flatten(tensor: &ObservationTensor, split: &PanelSplit) -> Result<FlattenedPanel> {
    split.validate(tensor)?;
    let n = tensor.n_units();
    let t = tensor.n_periods();
    let k = tensor.n_metrics();
    let t0 = split.t0;

    let donor_unit_indices: Vec<usize> =
        (0..n).filter(|&i| i != split.treatment_index).collect();
    let n_donors = donor_unit_indices.len();

    let mut donor = DMatrix::zeros(n_donors, k * t);
    let mut donor_present = vec![false; n_donors * k * t];
    let mut column_map = Vec::with_capacity(k * t);
    for metric in 0..k {
        for period in 0..t {
            let c = metric * t + period;
            column_map.push(ColumnOrigin { metric, period });
            for (r, &unit) in donor_unit_indices.iter().enumerate() {
                if let Some(v) = tensor.get(unit, period, metric) {
                    donor[(r, c)] = v;
                    donor_present[r * (k * t) + c] = true;
                }
            }
        }
    }

    let mut treatment_pre = Vec::with_capacity(k * t0);
    let mut treatment_map = Vec::with_capacity(k * t0);
    for metric in 0..k {
        for period in 0..t0 {
            treatment_map.push(ColumnOrigin { metric, period });
            treatment_pre.push(tensor.get(split.treatment_index, period, metric));
        }
    }

    Ok(FlattenedPanel {
        donor,
        donor_present,
        treatment_pre,
        column_map,
        treatment_map,
        n_metrics: k,
        n_periods: t,
        t0,
        donor_unit_indices,
    })
}

impl FlattenedPanel {
    pub fn n_donors(&self) -> usize {
        self.donor.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.donor.ncols()
    }

    pub fn n_metrics(&self) -> usize {
        self.n_metrics
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Donor matrix with missing entries zero-filled.
    pub fn donor_zero_filled(&self) -> &DMatrix<f64> {
        &self.donor
    }

    /// Donor entry, `None` when missing.
    pub fn donor_entry(&self, row: usize, col: usize) -> Option<f64> {
        self.donor_present[row * self.n_cols() + col].then(|| self.donor[(row, col)])
    }

    /// Pre-intervention treatment vector, metric-major, `None` where missing.
    pub fn treatment_pre(&self) -> &[Option<f64>] {
        &self.treatment_pre
    }

    /// (metric, period) origin per donor column.
    pub fn column_map(&self) -> &[ColumnOrigin] {
        &self.column_map
    }

    /// (metric, period) origin per treatment vector entry.
    pub fn treatment_map(&self) -> &[ColumnOrigin] {
        &self.treatment_map
    }

    /// Original tensor unit index per donor row.
    pub fn donor_unit_indices(&self) -> &[usize] {
        &self.donor_unit_indices
    }

    /// Copy of the panel with present treatment entries rewritten by the
    /// closure (called metric-major, in order); missing entries stay missing.
    /// Used by the residual-bootstrap band.
    pub fn map_treatment_pre<F>(&self, mut f: F) -> Self
    where
        F: FnMut(usize, usize, f64) -> f64,
    {
        let mut out = self.clone();
        for metric in 0..self.n_metrics {
            for period in 0..self.t0 {
                let idx = metric * self.t0 + period;
                if let Some(x) = out.treatment_pre[idx] {
                    out.treatment_pre[idx] = Some(f(metric, period, x));
                }
            }
        }
        out
    }

    /// Fraction of observed donor entries, clamped so division by it is
    /// always defined; flags the all-missing degenerate case.
    pub fn observed_fraction(&self) -> ObservedFraction {
        let total = self.n_donors() * self.n_cols();
        assert!(total > 0, "donor matrix must be nonempty");
        let observed = self.donor_present.iter().filter(|&&p| p).count();
        let floor = 1.0 / total as f64;
        if observed == 0 {
            ObservedFraction {
                value: floor,
                all_missing: true,
            }
        } else {
            ObservedFraction {
                value: (observed as f64 / total as f64).max(floor),
                all_missing: false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(label: &str, units: &[&str], rows: Vec<Vec<Option<f64>>>) -> MetricTable {
        MetricTable {
            label: label.into(),
            unit_labels: units.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    fn two_metric_tensor() -> ObservationTensor {
        // 3 units x 4 periods x 2 metrics, fully observed.
        let m1 = table(
            "a",
            &["u0", "u1", "u2"],
            vec![
                vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)],
                vec![Some(5.0), Some(6.0), Some(7.0), Some(8.0)],
                vec![Some(9.0), Some(10.0), Some(11.0), Some(12.0)],
            ],
        );
        let m2 = table(
            "b",
            &["u0", "u1", "u2"],
            vec![
                vec![Some(13.0), Some(14.0), Some(15.0), Some(16.0)],
                vec![Some(17.0), Some(18.0), Some(19.0), Some(20.0)],
                vec![Some(21.0), Some(22.0), Some(23.0), Some(24.0)],
            ],
        );
        ObservationTensor::from_metric_tables(&[m1, m2]).unwrap()
    }

    #[test]
    fn build_two_full_tables() {
        let t = two_metric_tensor();
        assert_eq!(t.n_units(), 3);
        assert_eq!(t.n_periods(), 4);
        assert_eq!(t.n_metrics(), 2);
        assert_eq!(t.n_missing(), 0);
        assert_eq!(t.get(1, 2, 0), Some(7.0));
        assert_eq!(t.get(2, 3, 1), Some(24.0));
    }

    #[test]
    fn build_records_single_missing_cell() {
        let m1 = table(
            "a",
            &["u0", "u1"],
            vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), Some(4.0)]],
        );
        let m2 = table(
            "b",
            &["u0", "u1"],
            vec![vec![Some(5.0), None], vec![Some(7.0), Some(8.0)]],
        );
        let t = ObservationTensor::from_metric_tables(&[m1, m2]).unwrap();
        assert_eq!(t.n_missing(), 1);
        assert_eq!(t.get(0, 1, 1), None);
        assert_eq!(t.get(0, 1, 0), Some(2.0));
    }

    #[test]
    fn build_rejects_mismatched_period_counts() {
        let m1 = table(
            "a",
            &["u0", "u1", "u2"],
            vec![
                vec![Some(1.0); 4],
                vec![Some(1.0); 4],
                vec![Some(1.0); 4],
            ],
        );
        let m2 = table(
            "b",
            &["u0", "u1", "u2"],
            vec![
                vec![Some(1.0); 5],
                vec![Some(1.0); 5],
                vec![Some(1.0); 5],
            ],
        );
        let err = ObservationTensor::from_metric_tables(&[m1, m2]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn build_rejects_non_finite() {
        let m1 = table(
            "a",
            &["u0", "u1"],
            vec![vec![Some(1.0), Some(f64::NAN)], vec![Some(3.0), Some(4.0)]],
        );
        let err = ObservationTensor::from_metric_tables(&[m1]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { unit: 0, period: 1, metric: 0 }));
    }

    #[test]
    fn build_aligns_units_by_label() {
        let m1 = table(
            "a",
            &["u0", "u1"],
            vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), Some(4.0)]],
        );
        // Same units, swapped order.
        let m2 = table(
            "b",
            &["u1", "u0"],
            vec![vec![Some(30.0), Some(40.0)], vec![Some(10.0), Some(20.0)]],
        );
        let t = ObservationTensor::from_metric_tables(&[m1, m2]).unwrap();
        assert_eq!(t.get(0, 0, 1), Some(10.0));
        assert_eq!(t.get(1, 1, 1), Some(40.0));
    }

    #[test]
    fn flatten_single_donor_row_is_metric_major() {
        // N=2, T=2, K=2; donor unit u1 has rows [1,2] (metric a) and [3,4] (metric b).
        let m1 = table(
            "a",
            &["u0", "u1"],
            vec![vec![Some(9.0), Some(9.0)], vec![Some(1.0), Some(2.0)]],
        );
        let m2 = table(
            "b",
            &["u0", "u1"],
            vec![vec![Some(9.0), Some(9.0)], vec![Some(3.0), Some(4.0)]],
        );
        let t = ObservationTensor::from_metric_tables(&[m1, m2]).unwrap();
        let panel = flatten(&t, &PanelSplit::new(0, 1)).unwrap();
        assert_eq!(panel.n_donors(), 1);
        let row: Vec<f64> = (0..4).map(|c| panel.donor_entry(0, c).unwrap()).collect();
        assert_eq!(row, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_k1_is_the_single_slice_without_treatment_row() {
        let t = two_metric_tensor().take_metrics(1);
        let panel = flatten(&t, &PanelSplit::new(1, 2)).unwrap();
        assert_eq!(panel.n_cols(), 4);
        assert_eq!(panel.donor_entry(0, 0), Some(1.0));
        assert_eq!(panel.donor_entry(1, 3), Some(12.0));
        assert_eq!(panel.donor_unit_indices(), &[0, 2]);
    }

    #[test]
    fn flatten_treatment_map_covers_pre_periods_metric_major() {
        // 3x3x2 tensor, t0 = 2: 4 entries mapping metrics {0,1} x periods {0,1}.
        let t = ObservationTensor::from_fn(
            3,
            3,
            2,
            vec!["u0".into(), "u1".into(), "u2".into()],
            vec!["a".into(), "b".into()],
            |i, j, k| (i * 100 + k * 10 + j) as f64,
        )
        .unwrap();
        let panel = flatten(&t, &PanelSplit::new(0, 2)).unwrap();
        assert_eq!(panel.treatment_pre().len(), 4);
        let map: Vec<(usize, usize)> = panel
            .treatment_map()
            .iter()
            .map(|o| (o.metric, o.period))
            .collect();
        assert_eq!(map, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(panel.treatment_pre()[2], Some(10.0));
    }

    #[test]
    fn flatten_rejects_bad_split() {
        let t = two_metric_tensor();
        assert!(flatten(&t, &PanelSplit::new(3, 1)).is_err());
        assert!(flatten(&t, &PanelSplit::new(0, 0)).is_err());
        assert!(flatten(&t, &PanelSplit::new(0, 4)).is_err());
    }

    #[test]
    fn observed_fraction_fully_observed() {
        let panel = flatten(&two_metric_tensor(), &PanelSplit::new(0, 2)).unwrap();
        let f = panel.observed_fraction();
        assert_eq!(f.value, 1.0);
        assert!(!f.all_missing);
    }

    #[test]
    fn observed_fraction_counts_missing() {
        // 2x2 donor with 1 of 4 entries missing -> 0.75.
        let m1 = table(
            "a",
            &["t", "d0", "d1"],
            vec![
                vec![Some(0.0), Some(0.0)],
                vec![Some(1.0), None],
                vec![Some(3.0), Some(4.0)],
            ],
        );
        let t = ObservationTensor::from_metric_tables(&[m1]).unwrap();
        let panel = flatten(&t, &PanelSplit::new(0, 1)).unwrap();
        assert_eq!(panel.observed_fraction().value, 0.75);
    }

    #[test]
    fn observed_fraction_all_missing_clamps_with_flag() {
        // 3x4 donor, every donor entry missing: clamp floor 1/12, flag set,
        // and the value stays finite and positive.
        let rows = vec![vec![None; 4]; 3];
        let mut all = vec![vec![Some(1.0); 4]];
        all.extend(rows);
        let m1 = MetricTable {
            label: "a".into(),
            unit_labels: vec!["t".into(), "d0".into(), "d1".into(), "d2".into()],
            rows: all,
        };
        let t = ObservationTensor::from_metric_tables(&[m1]).unwrap();
        let panel = flatten(&t, &PanelSplit::new(0, 1)).unwrap();
        let f = panel.observed_fraction();
        assert!(f.all_missing);
        assert_eq!(f.value, 1.0 / 12.0);
        assert!(f.value.is_finite() && f.value > 0.0);
    }

    #[test]
    fn unflatten_roundtrip_reproduces_slices() {
        let t = two_metric_tensor();
        let split = PanelSplit::new(1, 2);
        let panel = flatten(&t, &split).unwrap();
        for (c, origin) in panel.column_map().iter().enumerate() {
            for (r, &unit) in panel.donor_unit_indices().iter().enumerate() {
                assert_eq!(
                    panel.donor_entry(r, c),
                    t.get(unit, origin.period, origin.metric)
                );
            }
        }
    }

    #[test]
    fn metric_label_rename_does_not_change_flattening() {
        let t = two_metric_tensor();
        let mut renamed = t.clone();
        renamed.metric_labels = vec!["x".into(), "y".into()];
        let split = PanelSplit::new(0, 2);
        let a = flatten(&t, &split).unwrap();
        let b = flatten(&renamed, &split).unwrap();
        assert_eq!(a.donor_zero_filled(), b.donor_zero_filled());
    }

    #[test]
    fn metric_order_is_contractual() {
        let t = two_metric_tensor();
        let swapped = t.select_metrics(&[1, 0]);
        let split = PanelSplit::new(0, 2);
        let a = flatten(&t, &split).unwrap();
        let b = flatten(&swapped, &split).unwrap();
        assert_ne!(a.donor_zero_filled(), b.donor_zero_filled());
        // The swap moves metric blocks wholesale.
        assert_eq!(a.donor_zero_filled().column(0), b.donor_zero_filled().column(4));
    }

    #[test]
    fn bernoulli_mask_protects_treatment_row_and_is_seeded() {
        let t = ObservationTensor::from_fn(
            20,
            10,
            2,
            (0..20).map(|i| format!("u{i}")).collect(),
            vec!["a".into(), "b".into()],
            |i, j, k| (i + j + k) as f64 + 1.0,
        )
        .unwrap();
        let masked = t.with_bernoulli_mask(0.5, 7, Some(0));
        let again = t.with_bernoulli_mask(0.5, 7, Some(0));
        assert_eq!(masked, again);
        for j in 0..10 {
            for k in 0..2 {
                assert!(masked.get(0, j, k).is_some());
            }
        }
        assert!(masked.n_missing() > 0);
    }
}
