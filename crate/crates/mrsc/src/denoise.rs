//! Donor-pool de-noising by hard singular value thresholding.
//!
//! Missing donor entries are zero-filled, the full SVD is taken, a retained
//! set of singular components is chosen by a [`ThresholdPolicy`], and the
//! truncated reconstruction is rescaled by the inverse observed fraction.
//! The module also provides the energy-based effective rank and the
//! rank-preservation diagnostic that decides whether metrics share enough
//! latent structure to be concatenated at all.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FlattenedPanel, ObservationTensor};

/// Default spectral-energy fraction defining the effective rank.
pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.995;
/// Default combined/per-metric rank ratio below which the diagnostic passes.
pub const DEFAULT_PASS_RATIO: f64 = 1.25;

/// How the retained singular-value set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Keep the top `r` singular values.
    FixedRank(usize),
    /// Keep every singular value `s_i >= lambda`.
    SingularValueCutoff(f64),
    /// Keep the smallest prefix capturing the given fraction of squared
    /// spectral energy; must lie in (0, 1].
    EnergyFraction(f64),
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::FixedRank(r) => write!(f, "rank={r}"),
            ThresholdPolicy::SingularValueCutoff(l) => write!(f, "lambda={l}"),
            ThresholdPolicy::EnergyFraction(p) => write!(f, "energy={p}"),
        }
    }
}

/// De-noised donor matrix plus the spectrum it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedModel {
    m_hat: DMatrix<f64>,
    singular_values: Vec<f64>,
    retained_rank: usize,
    rho_hat: f64,
    n_metrics: usize,
    n_periods: usize,
}

/// Effective rank at an energy threshold, with the all-zero-spectrum flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectiveRank {
    pub rank: usize,
    /// Set when every singular value is zero; the rank is then 0 by decision
    /// rather than an error, so downstream stages see a well-defined (zero)
    /// model.
    pub all_zero: bool,
}

/// How the diagnostic turns a spectrum into a rank.
///
/// Energy fractions suit noisy observation matrices, where the question is
/// how many components carry the signal. On noiseless or near-exact-rank
/// means the energy criterion degenerates (one dominant component can carry
/// well over 99.5% of squared energy), so structural comparisons use the
/// numerical rank instead: the count of singular values resolvable above
/// machine precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RankCriterion {
    EnergyFraction(f64),
    NumericalRank,
}

/// Output of the rank-preservation diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub per_metric_rank: Vec<usize>,
    pub combined_rank: usize,
    /// combined_rank / max(per_metric_rank); 1.0 for degenerate all-zero input.
    pub ratio: f64,
    pub passed: bool,
    pub criterion: RankCriterion,
    pub pass_ratio: f64,
    pub metric_labels: Vec<String>,
    pub per_metric_spectra: Vec<Vec<f64>>,
    pub combined_spectrum: Vec<f64>,
}

/// Deterministic SVD: singular values sorted descending, and each left
/// singular vector's largest-magnitude entry forced positive (the paired
/// right vector is flipped with it), so factors are canonical.
pub(crate) struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub(crate) fn sorted_svd(matrix: &DMatrix<f64>) -> Result<SortedSvd> {
    let thin = crate::svd::thin_svd(matrix)?;
    let mut u = thin.u;
    let mut v_t = thin.v_t;

    for c in 0..u.ncols() {
        let mut arg = 0;
        let mut best = 0.0_f64;
        for r in 0..u.nrows() {
            let a = u[(r, c)].abs();
            if a > best {
                best = a;
                arg = r;
            }
        }
        if u[(arg, c)] < 0.0 {
            for r in 0..u.nrows() {
                u[(r, c)] = -u[(r, c)];
            }
            for j in 0..v_t.ncols() {
                v_t[(c, j)] = -v_t[(c, j)];
            }
        }
    }

    Ok(SortedSvd {
        u,
        singular_values: DVector::from_vec(thin.s),
        v_t,
    })
}

/// Descending singular values of a matrix.
pub fn singular_values_desc(matrix: &DMatrix<f64>) -> Result<Vec<f64>> {
    crate::svd::singular_values(matrix)
}

/// Smallest `m` whose leading singular values carry at least
/// `energy_threshold` of the total squared spectral energy.
///
/// The spectrum must be nonempty, nonnegative, and sorted descending; an
/// all-zero spectrum yields rank 0 with the flag set instead of an error.
pub fn effective_rank(spectrum: &[f64], energy_threshold: f64) -> Result<EffectiveRank> {
    if spectrum.is_empty() {
        return Err(Error::InvalidSpectrum("spectrum is empty".into()));
    }
    if !(0.0 < energy_threshold && energy_threshold <= 1.0) {
        return Err(Error::InvalidSpectrum(format!(
            "energy threshold {energy_threshold} outside (0, 1]"
        )));
    }
    for w in spectrum.windows(2) {
        if w[1] > w[0] {
            return Err(Error::InvalidSpectrum(
                "spectrum not sorted in descending order".into(),
            ));
        }
    }
    if spectrum[0] < 0.0 || !spectrum.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidSpectrum(
            "spectrum contains negative or non-finite values".into(),
        ));
    }

    let total: f64 = spectrum.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(EffectiveRank {
            rank: 0,
            all_zero: true,
        });
    }
    let mut acc = 0.0;
    for (m, s) in spectrum.iter().enumerate() {
        acc += s * s;
        if acc / total >= energy_threshold {
            return Ok(EffectiveRank {
                rank: m + 1,
                all_zero: false,
            });
        }
    }
    Ok(EffectiveRank {
        rank: spectrum.len(),
        all_zero: false,
    })
}

/// Count of singular values resolvable above machine precision relative to
/// the largest: `s_i > eps * s_1`. This is the numerical matrix rank.
pub fn numerical_rank(spectrum: &[f64]) -> usize {
    let s1 = spectrum.first().copied().unwrap_or(0.0);
    if s1 <= 0.0 {
        return 0;
    }
    let floor = s1 * f64::EPSILON;
    spectrum.iter().filter(|&&s| s > floor).count()
}

fn rank_by_criterion(spectrum: &[f64], criterion: RankCriterion) -> Result<usize> {
    match criterion {
        RankCriterion::EnergyFraction(p) => Ok(effective_rank(spectrum, p)?.rank),
        RankCriterion::NumericalRank => Ok(numerical_rank(spectrum)),
    }
}

fn retained_count(
    spectrum: &DVector<f64>,
    policy: &ThresholdPolicy,
    max_rank: usize,
) -> Result<usize> {
    let positive = spectrum.iter().filter(|&&s| s > 0.0).count();
    match *policy {
        ThresholdPolicy::FixedRank(r) => {
            if r > max_rank {
                return Err(Error::RankTooLarge {
                    requested: r,
                    max: max_rank,
                });
            }
            // Exact zeros contribute nothing and would break the rank invariant.
            Ok(r.min(positive))
        }
        ThresholdPolicy::SingularValueCutoff(lambda) => {
            if lambda < 0.0 || !lambda.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "singular value cutoff {lambda} must be a nonnegative real"
                )));
            }
            Ok(spectrum
                .iter()
                .take(positive)
                .filter(|&&s| s >= lambda)
                .count())
        }
        ThresholdPolicy::EnergyFraction(p) => {
            let s: Vec<f64> = spectrum.iter().copied().collect();
            let er = effective_rank(&s, p)?;
            Ok(er.rank.min(positive))
        }
    }
}

/// Hard singular value thresholding of the donor matrix.
///
/// Missing entries are zero-filled before the SVD; the reconstruction from
/// the retained set is rescaled by `1 / rho_hat`, the clamped observed
/// fraction. The reported spectrum is pre-rescaling.
pub fn hsvt(panel: &FlattenedPanel, policy: &ThresholdPolicy) -> Result<DenoisedModel> {
    let z = panel.donor_zero_filled();
    let max_rank = z.nrows().min(z.ncols());
    let svd = sorted_svd(z)?;
    let m = retained_count(&svd.singular_values, policy, max_rank)?;
    let rho = panel.observed_fraction();

    let mut m_hat = DMatrix::zeros(z.nrows(), z.ncols());
    for i in 0..m {
        let scale = svd.singular_values[i] / rho.value;
        let u_i = svd.u.column(i);
        let v_i = svd.v_t.row(i);
        for c in 0..z.ncols() {
            let sv = scale * v_i[c];
            for r in 0..z.nrows() {
                m_hat[(r, c)] += u_i[r] * sv;
            }
        }
    }

    Ok(DenoisedModel {
        m_hat,
        singular_values: svd.singular_values.iter().copied().collect(),
        retained_rank: m,
        rho_hat: rho.value,
        n_metrics: panel.n_metrics(),
        n_periods: panel.n_periods(),
    })
}

impl DenoisedModel {
    /// The rescaled low-rank estimate of the donor mean matrix.
    pub fn m_hat(&self) -> &DMatrix<f64> {
        &self.m_hat
    }

    /// Full spectrum of the zero-filled donor matrix, descending,
    /// before the `1 / rho_hat` rescaling.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn retained_rank(&self) -> usize {
        self.retained_rank
    }

    pub fn rho_hat(&self) -> f64 {
        self.rho_hat
    }

    pub fn n_metrics(&self) -> usize {
        self.n_metrics
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_donors(&self) -> usize {
        self.m_hat.nrows()
    }

    /// The k-th metric's (N-1) x T block of `m_hat`.
    pub fn block(&self, metric: usize) -> DMatrixView<'_, f64> {
        assert!(metric < self.n_metrics, "metric index out of range");
        self.m_hat.columns(metric * self.n_periods, self.n_periods)
    }

    /// Wraps raw observations as an identity "de-noising" (zero-filled, no
    /// thresholding, no rescale). Used by the no-denoise ablation; the
    /// spectrum is left empty since nothing was thresholded.
    pub fn passthrough(panel: &FlattenedPanel) -> Self {
        let z = panel.donor_zero_filled().clone();
        let rank = z.nrows().min(z.ncols());
        Self {
            m_hat: z,
            singular_values: Vec::new(),
            retained_rank: rank,
            rho_hat: 1.0,
            n_metrics: panel.n_metrics(),
            n_periods: panel.n_periods(),
        }
    }

    /// Writes the model as JSON metadata plus a little-endian `f64`
    /// row-major matrix sidecar next to it.
    pub fn save(&self, json_path: &Path) -> Result<()> {
        let matrix_file = json_path
            .file_stem()
            .map(|s| format!("{}.bin", s.to_string_lossy()))
            .unwrap_or_else(|| "model.bin".to_string());
        let meta = ModelFile {
            n_donors: self.m_hat.nrows(),
            n_cols: self.m_hat.ncols(),
            n_metrics: self.n_metrics,
            n_periods: self.n_periods,
            retained_rank: self.retained_rank,
            rho_hat: self.rho_hat,
            spectrum: self.singular_values.clone(),
            matrix_file: matrix_file.clone(),
        };
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        std::fs::write(json_path, json)?;

        let bin_path = json_path.with_file_name(matrix_file);
        let mut buf = Vec::with_capacity(self.m_hat.len() * 8);
        for r in 0..self.m_hat.nrows() {
            for c in 0..self.m_hat.ncols() {
                buf.extend_from_slice(&self.m_hat[(r, c)].to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(bin_path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads a model written by [`DenoisedModel::save`].
    pub fn load(json_path: &Path) -> Result<Self> {
        let meta: ModelFile = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let bin_path = json_path.with_file_name(&meta.matrix_file);
        let mut buf = Vec::new();
        std::fs::File::open(&bin_path)?.read_to_end(&mut buf)?;
        let expected = meta.n_donors * meta.n_cols * 8;
        if buf.len() != expected {
            return Err(Error::InvalidInput(format!(
                "matrix sidecar {} holds {} bytes, expected {}",
                bin_path.display(),
                buf.len(),
                expected
            )));
        }
        let mut m_hat = DMatrix::zeros(meta.n_donors, meta.n_cols);
        for r in 0..meta.n_donors {
            for c in 0..meta.n_cols {
                let off = (r * meta.n_cols + c) * 8;
                m_hat[(r, c)] = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            }
        }
        Ok(Self {
            m_hat,
            singular_values: meta.spectrum,
            retained_rank: meta.retained_rank,
            rho_hat: meta.rho_hat,
            n_metrics: meta.n_metrics,
            n_periods: meta.n_periods,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n_donors: usize,
    n_cols: usize,
    n_metrics: usize,
    n_periods: usize,
    retained_rank: usize,
    rho_hat: f64,
    spectrum: Vec<f64>,
    matrix_file: String,
}

/// Checks that the per-metric slices and their concatenation have matching
/// ranks under the spectral-energy criterion, i.e. that the metrics
/// plausibly share latent row and column structure and concatenating them
/// is justified.
///
/// Slices are zero-filled before the SVD, so the diagnostic also runs on
/// observation data with missing entries. For K = 1 the ratio is trivially 1.
pub fn rank_preservation_diagnostic(
    tensor: &ObservationTensor,
    energy_threshold: f64,
    pass_ratio: f64,
) -> Result<DiagnosticReport> {
    rank_preservation_diagnostic_with(
        tensor,
        RankCriterion::EnergyFraction(energy_threshold),
        pass_ratio,
    )
}

/// [`rank_preservation_diagnostic`] with an explicit rank criterion; use
/// [`RankCriterion::NumericalRank`] for noiseless mean matrices.
pub fn rank_preservation_diagnostic_with(
    tensor: &ObservationTensor,
    criterion: RankCriterion,
    pass_ratio: f64,
) -> Result<DiagnosticReport> {
    let k = tensor.n_metrics();
    let n = tensor.n_units();
    let t = tensor.n_periods();

    let mut per_metric_rank = Vec::with_capacity(k);
    let mut per_metric_spectra = Vec::with_capacity(k);
    let mut combined = DMatrix::zeros(n, k * t);
    for metric in 0..k {
        let slice = tensor.zero_filled_slice(metric);
        combined.view_mut((0, metric * t), (n, t)).copy_from(&slice);
        let spectrum = singular_values_desc(&slice)?;
        per_metric_rank.push(rank_by_criterion(&spectrum, criterion)?);
        per_metric_spectra.push(spectrum);
    }
    let combined_spectrum = singular_values_desc(&combined)?;
    let combined_rank = rank_by_criterion(&combined_spectrum, criterion)?;

    let max_per = per_metric_rank.iter().copied().max().unwrap_or(0);
    let ratio = if max_per == 0 {
        1.0
    } else {
        combined_rank as f64 / max_per as f64
    };

    Ok(DiagnosticReport {
        per_metric_rank,
        combined_rank,
        ratio,
        passed: ratio <= pass_ratio,
        criterion,
        pass_ratio,
        metric_labels: tensor.metric_labels().to_vec(),
        per_metric_spectra,
        combined_spectrum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{flatten, MetricTable, PanelSplit};

    fn panel_from_rows(rows: &[Vec<Option<f64>>], t0: usize) -> FlattenedPanel {
        // Prepend an all-observed treatment row so the donor matrix is
        // exactly `rows`.
        let t = rows[0].len();
        let mut all = vec![vec![Some(0.5); t]];
        all.extend_from_slice(rows);
        let table = MetricTable {
            label: "m".into(),
            unit_labels: (0..all.len()).map(|i| format!("u{i}")).collect(),
            rows: all,
        };
        let tensor = ObservationTensor::from_metric_tables(&[table]).unwrap();
        flatten(&tensor, &PanelSplit::new(0, t0)).unwrap()
    }

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    // Cyclic Jacobi eigensolver for symmetric matrices; the independent
    // oracle for the HSVT reconstruction test.
    fn jacobi_eigh(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = a.nrows();
        let mut m = a.clone();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let mip = m[(i, p)];
                        let miq = m[(i, q)];
                        m[(i, p)] = c * mip - s * miq;
                        m[(i, q)] = s * mip + c * miq;
                    }
                    for i in 0..n {
                        let mpi = m[(p, i)];
                        let mqi = m[(q, i)];
                        m[(p, i)] = c * mpi - s * mqi;
                        m[(q, i)] = s * mpi + c * mqi;
                    }
                    for i in 0..n {
                        let vip = v[(i, p)];
                        let viq = v[(i, q)];
                        v[(i, p)] = c * vip - s * viq;
                        v[(i, q)] = s * vip + c * viq;
                    }
                }
            }
        }
        let eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
        (eig, v)
    }

    #[test]
    fn hsvt_recovers_noiseless_rank_one_donor() {
        let u = [1.0, 2.0, -1.5, 0.5];
        let w = [3.0, -1.0, 2.0, 4.0, 0.5];
        let rows: Vec<Vec<Option<f64>>> = u
            .iter()
            .map(|&ui| w.iter().map(|&wj| Some(ui * wj)).collect())
            .collect();
        let panel = panel_from_rows(&rows, 2);
        let model = hsvt(&panel, &ThresholdPolicy::FixedRank(1)).unwrap();
        assert_eq!(model.retained_rank(), 1);
        assert_eq!(model.rho_hat(), 1.0);
        assert!(rel_frobenius(model.m_hat(), panel.donor_zero_filled()) < 1e-10);
    }

    #[test]
    fn cutoff_above_top_singular_value_yields_zero_model() {
        let rows = vec![vec![Some(1.0), Some(2.0)], vec![Some(3.0), Some(4.0)]];
        let panel = panel_from_rows(&rows, 1);
        let s1 = singular_values_desc(panel.donor_zero_filled()).unwrap()[0];
        let model = hsvt(&panel, &ThresholdPolicy::SingularValueCutoff(s1 + 1.0)).unwrap();
        assert_eq!(model.retained_rank(), 0);
        assert_eq!(model.m_hat().norm(), 0.0);
    }

    #[test]
    fn hsvt_masked_reconstruction_matches_eigensolve_oracle() {
        // 4x4 donor with a fixed 8-of-16 mask: rho = 0.5, so
        // m_hat = 2 * truncated-SVD(zero-filled Z). The oracle computes the
        // SVD independently via a Jacobi eigensolve of Z^T Z.
        let vals = [
            [4.0, -2.0, 1.0, 3.0],
            [0.5, 2.5, -1.0, 2.0],
            [3.0, 1.0, 2.0, -2.5],
            [-1.5, 2.0, 4.0, 1.0],
        ];
        let keep = [
            [true, false, true, false],
            [false, true, false, true],
            [true, true, false, false],
            [false, false, true, true],
        ];
        let rows: Vec<Vec<Option<f64>>> = (0..4)
            .map(|i| (0..4).map(|j| keep[i][j].then(|| vals[i][j])).collect())
            .collect();
        let panel = panel_from_rows(&rows, 2);
        assert_eq!(panel.observed_fraction().value, 0.5);

        let rank = 2;
        let model = hsvt(&panel, &ThresholdPolicy::FixedRank(rank)).unwrap();

        let z = panel.donor_zero_filled();
        let (eig, v) = jacobi_eigh(&(z.transpose() * z));
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap());
        let mut oracle = DMatrix::<f64>::zeros(4, 4);
        for &i in order.iter().take(rank) {
            let sigma = eig[i].max(0.0).sqrt();
            let v_i = v.column(i);
            let u_i = (z * v_i) / sigma;
            oracle += 2.0 * sigma * &u_i * v_i.transpose();
        }
        assert!(rel_frobenius(model.m_hat(), &oracle) < 1e-8);
    }

    #[test]
    fn fixed_rank_too_large_errors() {
        let rows = vec![
            vec![Some(1.0), Some(2.0), Some(3.0)],
            vec![Some(4.0), Some(5.0), Some(6.0)],
        ];
        let panel = panel_from_rows(&rows, 1);
        let err = hsvt(&panel, &ThresholdPolicy::FixedRank(3)).unwrap_err();
        assert!(matches!(err, Error::RankTooLarge { requested: 3, max: 2 }));
    }

    #[test]
    fn effective_rank_basics() {
        assert_eq!(effective_rank(&[1.0, 0.0, 0.0], 0.995).unwrap().rank, 1);
        assert_eq!(effective_rank(&[10.0, 10.0, 1e-6], 0.995).unwrap().rank, 2);
        let er = effective_rank(&[0.0, 0.0], 0.5).unwrap();
        assert_eq!(er.rank, 0);
        assert!(er.all_zero);
        assert!(matches!(
            effective_rank(&[3.0, 4.0], 0.995),
            Err(Error::InvalidSpectrum(_))
        ));
        assert!(effective_rank(&[], 0.9).is_err());
        assert!(effective_rank(&[1.0], 0.0).is_err());
        assert!(effective_rank(&[1.0], 1.5).is_err());
    }

    #[test]
    fn idempotent_on_exact_rank_input() {
        let a = DMatrix::from_fn(6, 3, |r, c| ((r * 3 + c) as f64 * 0.7).sin() + 0.2);
        let b = DMatrix::from_fn(3, 8, |r, c| ((r * 8 + c) as f64 * 0.3).cos() - 0.1);
        let full = a * b;
        let rows: Vec<Vec<Option<f64>>> = (0..6)
            .map(|i| (0..8).map(|j| Some(full[(i, j)])).collect())
            .collect();
        let panel = panel_from_rows(&rows, 4);
        let model = hsvt(&panel, &ThresholdPolicy::FixedRank(3)).unwrap();
        assert_eq!(model.retained_rank(), 3);
        assert!(rel_frobenius(model.m_hat(), &full) < 1e-10);
    }

    #[test]
    fn retained_rank_monotone_in_lambda_and_energy() {
        let rows: Vec<Vec<Option<f64>>> = (0..5)
            .map(|i| {
                (0..7)
                    .map(|j| Some(((i * 7 + j) as f64 * 0.9).sin() * (j as f64 + 1.0)))
                    .collect()
            })
            .collect();
        let panel = panel_from_rows(&rows, 3);
        let spectrum = singular_values_desc(panel.donor_zero_filled()).unwrap();

        let mut prev = usize::MAX;
        for step in 0..6 {
            let lambda = spectrum[0] * step as f64 / 4.0;
            let m = hsvt(&panel, &ThresholdPolicy::SingularValueCutoff(lambda)).unwrap();
            assert!(m.retained_rank() <= prev);
            prev = m.retained_rank();
        }

        let mut prev = 0;
        for p in [0.2, 0.5, 0.8, 0.95, 1.0] {
            let m = hsvt(&panel, &ThresholdPolicy::EnergyFraction(p)).unwrap();
            assert!(m.retained_rank() >= prev);
            prev = m.retained_rank();
        }
    }

    #[test]
    fn fully_observed_equals_plain_truncated_svd() {
        let rows: Vec<Vec<Option<f64>>> = (0..4)
            .map(|i| {
                (0..5)
                    .map(|j| Some(((i + 2 * j) as f64).sqrt() + i as f64))
                    .collect()
            })
            .collect();
        let panel = panel_from_rows(&rows, 2);
        let model = hsvt(&panel, &ThresholdPolicy::FixedRank(2)).unwrap();
        assert_eq!(model.rho_hat(), 1.0);

        // Plain truncated SVD straight from nalgebra, no rescale.
        let svd = nalgebra::linalg::SVD::new(panel.donor_zero_filled().clone(), true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
        });
        let mut plain = DMatrix::<f64>::zeros(4, 5);
        for &i in order.iter().take(2) {
            plain += svd.singular_values[i] * u.column(i) * v_t.row(i);
        }
        assert!(rel_frobenius(model.m_hat(), &plain) < 1e-12);
    }

    #[test]
    fn donor_row_permutation_permutes_m_hat_and_keeps_spectrum() {
        let rows: Vec<Vec<Option<f64>>> = (0..5)
            .map(|i| {
                (0..6)
                    .map(|j| Some(((i * 6 + j) as f64 * 1.3).sin() * 2.0))
                    .collect()
            })
            .collect();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<Vec<Option<f64>>> = perm.iter().map(|&i| rows[i].clone()).collect();

        let p1 = panel_from_rows(&rows, 3);
        let p2 = panel_from_rows(&permuted, 3);
        assert_eq!(p1.observed_fraction().value, p2.observed_fraction().value);

        let m1 = hsvt(&p1, &ThresholdPolicy::FixedRank(3)).unwrap();
        let m2 = hsvt(&p2, &ThresholdPolicy::FixedRank(3)).unwrap();
        for (a, b) in m1.singular_values().iter().zip(m2.singular_values()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..6 {
                assert!((m2.m_hat()[(new_row, c)] - m1.m_hat()[(old_row, c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn blocks_reconcatenate_to_m_hat() {
        let tensor = ObservationTensor::from_fn(
            4,
            3,
            2,
            (0..4).map(|i| format!("u{i}")).collect(),
            vec!["a".into(), "b".into()],
            |i, j, k| (i as f64 + 1.0) * (j as f64 - 0.5) + k as f64,
        )
        .unwrap();
        let panel = flatten(&tensor, &PanelSplit::new(0, 2)).unwrap();
        let model = hsvt(&panel, &ThresholdPolicy::EnergyFraction(1.0)).unwrap();
        let mut rebuilt = DMatrix::<f64>::zeros(3, 6);
        for k in 0..2 {
            rebuilt.view_mut((0, k * 3), (3, 3)).copy_from(&model.block(k));
        }
        assert_eq!(&rebuilt, model.m_hat());
    }

    #[test]
    fn diagnostic_passes_for_shared_row_space_and_fails_otherwise() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let a_perp = [2.0, -1.0, 0.0, 0.0];
        let b = [1.0, 0.5, -0.5];
        let c = [2.0, 1.0, 1.0];

        let shared = ObservationTensor::from_fn(
            4,
            3,
            2,
            (0..4).map(|i| format!("u{i}")).collect(),
            vec!["m1".into(), "m2".into()],
            |i, j, k| if k == 0 { a[i] * b[j] } else { a[i] * c[j] },
        )
        .unwrap();
        let report = rank_preservation_diagnostic(&shared, 0.995, 1.25).unwrap();
        assert_eq!(report.per_metric_rank, vec![1, 1]);
        assert_eq!(report.combined_rank, 1);
        assert!(report.passed);

        let different = ObservationTensor::from_fn(
            4,
            3,
            2,
            (0..4).map(|i| format!("u{i}")).collect(),
            vec!["m1".into(), "m2".into()],
            |i, j, k| if k == 0 { a[i] * b[j] } else { a_perp[i] * c[j] },
        )
        .unwrap();
        let report = rank_preservation_diagnostic(&different, 0.995, 1.25).unwrap();
        assert_eq!(report.per_metric_rank, vec![1, 1]);
        assert_eq!(report.combined_rank, 2);
        assert!(!report.passed);
        assert!(report.ratio >= 1.0 - 1e-12);
    }

    #[test]
    fn diagnostic_k1_trivially_passes() {
        let tensor = ObservationTensor::from_fn(
            3,
            4,
            1,
            (0..3).map(|i| format!("u{i}")).collect(),
            vec!["only".into()],
            |i, j, _| (i + j) as f64 + 1.0,
        )
        .unwrap();
        let report = rank_preservation_diagnostic(&tensor, 0.995, 1.25).unwrap();
        assert_eq!(report.ratio, 1.0);
        assert!(report.passed);
    }

    #[test]
    fn model_save_load_roundtrip_is_exact() {
        let rows: Vec<Vec<Option<f64>>> = (0..3)
            .map(|i| {
                (0..4)
                    .map(|j| Some((i as f64 + 0.3) * (j as f64 - 1.7)))
                    .collect()
            })
            .collect();
        let panel = panel_from_rows(&rows, 2);
        let model = hsvt(&panel, &ThresholdPolicy::FixedRank(1)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = DenoisedModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn hsvt_is_deterministic() {
        let rows: Vec<Vec<Option<f64>>> = (0..6)
            .map(|i| {
                (0..9)
                    .map(|j| Some(((i * 9 + j) as f64 * 2.1).sin()))
                    .collect()
            })
            .collect();
        let panel = panel_from_rows(&rows, 4);
        let m1 = hsvt(&panel, &ThresholdPolicy::EnergyFraction(0.9)).unwrap();
        let m2 = hsvt(&panel, &ThresholdPolicy::EnergyFraction(0.9)).unwrap();
        assert_eq!(m1, m2);
    }
}
