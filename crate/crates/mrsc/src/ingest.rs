//! File formats: per-metric CSVs, the JSON dataset manifest, ground-truth
//! sidecars, and bundle export.
//!
//! A metric CSV has a header row, then one row per unit: the first column
//! is the unit label, the remaining columns are period values, and an empty
//! cell is a missing observation. A manifest lists the metric files and
//! optionally names the treatment unit and intervention period.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{MetricTable, ObservationTensor};
use crate::synth::GroundTruthBundle;

/// One metric file entry in a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMetric {
    pub label: String,
    pub path: String,
}

/// Dataset manifest. Paths are resolved relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub metrics: Vec<ManifestMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
    /// Periods per labeled time step (e.g. 6 balls per over); `t0` is
    /// multiplied by this on ingestion. Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_scale: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl Manifest {
    /// Intervention period in raw periods (t0 times the period scale).
    pub fn effective_t0(&self) -> Option<usize> {
        self.t0.map(|t| t * self.period_scale.unwrap_or(1))
    }
}

/// Ground-truth sidecar written next to exported bundles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub rng: String,
    pub seed: u64,
    pub beta_star: Vec<f64>,
    /// Noiseless means indexed `[metric][unit][period]`.
    pub means: Vec<Vec<Vec<f64>>>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("manifest {} is not valid: {e}", path.display())))?;
    if manifest.metrics.is_empty() {
        return Err(Error::EmptyInput(format!(
            "manifest {} lists no metric files",
            path.display()
        )));
    }
    Ok(manifest)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

/// Reads one metric CSV into a table.
pub fn read_metric_csv(path: &Path, label: &str) -> Result<MetricTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;

    let mut unit_labels = Vec::new();
    let mut rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.is_empty() {
            continue;
        }
        let unit = record
            .get(0)
            .ok_or_else(|| Error::EmptyInput(format!("{}: empty record", path.display())))?
            .trim()
            .to_string();
        let mut values = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, cell) in record.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::InvalidInput(format!(
                        "{} row {} column {}: '{}' is not a number",
                        path.display(),
                        row_idx + 2,
                        col + 2,
                        cell
                    ))
                })?;
                values.push(Some(v));
            }
        }
        unit_labels.push(unit);
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok(MetricTable {
        label: label.to_string(),
        unit_labels,
        rows,
    })
}

/// Loads the tensor a manifest describes.
pub fn load_tensor(manifest_path: &Path) -> Result<(ObservationTensor, Manifest)> {
    let manifest = read_manifest(manifest_path)?;
    let tables: Vec<MetricTable> = manifest
        .metrics
        .iter()
        .map(|m| read_metric_csv(&resolve(manifest_path, &m.path), &m.label))
        .collect::<Result<_>>()?;
    let tensor = ObservationTensor::from_metric_tables(&tables)?;
    Ok((tensor, manifest))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes one metric slice as CSV; missing entries become empty cells.
pub fn write_metric_csv(path: &Path, tensor: &ObservationTensor, metric: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["unit".to_string()];
    header.extend((1..=tensor.n_periods()).map(|j| format!("p{j}")));
    w.write_record(&header)?;
    for i in 0..tensor.n_units() {
        let mut row = vec![tensor.unit_labels()[i].clone()];
        for j in 0..tensor.n_periods() {
            row.push(match tensor.get(i, j, metric) {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a tensor (typically a generated bundle's observations) to the
/// manifest + CSV layout under `dir`, with an optional ground-truth sidecar.
/// Returns the manifest path.
pub fn export_tensor(
    tensor: &ObservationTensor,
    treatment: Option<&str>,
    t0: Option<usize>,
    ground_truth: Option<&GroundTruthFile>,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut metrics = Vec::new();
    for k in 0..tensor.n_metrics() {
        let file = format!("metric_{}.csv", k + 1);
        write_metric_csv(&dir.join(&file), tensor, k)?;
        metrics.push(ManifestMetric {
            label: tensor.metric_labels()[k].clone(),
            path: file,
        });
    }
    let mut manifest = Manifest {
        metrics,
        treatment: treatment.map(str::to_string),
        t0,
        period_scale: None,
        ground_truth: None,
    };
    if let Some(gt) = ground_truth {
        let mut json = serde_json::to_string_pretty(gt)?;
        json.push('\n');
        std::fs::write(dir.join("ground_truth.json"), json)?;
        manifest.ground_truth = Some("ground_truth.json".to_string());
    }
    let manifest_path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

/// Exports a generated bundle: observation CSVs, manifest naming the target
/// unit and split, and the ground-truth sidecar.
pub fn export_bundle(bundle: &GroundTruthBundle, t0: usize, dir: &Path) -> Result<PathBuf> {
    let mt = &bundle.mean_tensor;
    let means = (0..mt.n_metrics())
        .map(|k| {
            (0..mt.n_units())
                .map(|i| {
                    (0..mt.n_periods())
                        .map(|j| mt.get(i, j, k).unwrap_or(0.0))
                        .collect()
                })
                .collect()
        })
        .collect();
    let gt = GroundTruthFile {
        rng: bundle.rng_name.to_string(),
        seed: bundle.seed,
        beta_star: bundle.beta_star.clone(),
        means,
    };
    export_tensor(
        &bundle.tensor,
        Some(&bundle.tensor.unit_labels()[0].clone()),
        Some(t0),
        Some(&gt),
        dir,
    )
}

/// Per-metric shape and missing-data summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub label: String,
    pub n_units: usize,
    pub n_periods: usize,
    pub n_missing: usize,
    pub missing_percent: f64,
}

/// Validation outcome for a manifest: summaries when loadable, plus every
/// problem found. `valid` is the exit-code contract for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub n_units: Option<usize>,
    pub n_periods: Option<usize>,
    pub n_metrics: usize,
    pub metrics: Vec<MetricSummary>,
    pub treatment: Option<String>,
    pub t0: Option<usize>,
    pub errors: Vec<String>,
}

/// Checks a manifest and its metric files, collecting every error rather
/// than stopping at the first.
pub fn validate_manifest(manifest_path: &Path) -> ValidationReport {
    let mut report = ValidationReport {
        valid: false,
        n_units: None,
        n_periods: None,
        n_metrics: 0,
        metrics: Vec::new(),
        treatment: None,
        t0: None,
        errors: Vec::new(),
    };
    let manifest = match read_manifest(manifest_path) {
        Ok(m) => m,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    report.n_metrics = manifest.metrics.len();
    report.treatment = manifest.treatment.clone();
    report.t0 = manifest.effective_t0();

    let mut tables = Vec::new();
    for m in &manifest.metrics {
        match read_metric_csv(&resolve(manifest_path, &m.path), &m.label) {
            Ok(table) => {
                let n_units = table.unit_labels.len();
                let n_periods = table.rows.first().map_or(0, Vec::len);
                let n_missing = table
                    .rows
                    .iter()
                    .flat_map(|r| r.iter())
                    .filter(|c| c.is_none())
                    .count();
                let total = table.rows.iter().map(Vec::len).sum::<usize>().max(1);
                report.metrics.push(MetricSummary {
                    label: m.label.clone(),
                    n_units,
                    n_periods,
                    n_missing,
                    missing_percent: 100.0 * n_missing as f64 / total as f64,
                });
                tables.push(table);
            }
            Err(e) => report.errors.push(e.to_string()),
        }
    }
    if tables.len() != manifest.metrics.len() {
        return report;
    }

    match ObservationTensor::from_metric_tables(&tables) {
        Ok(tensor) => {
            report.n_units = Some(tensor.n_units());
            report.n_periods = Some(tensor.n_periods());
            if let Some(label) = &manifest.treatment {
                if tensor.unit_index(label).is_none() {
                    report
                        .errors
                        .push(format!("treatment unit '{label}' not found"));
                }
            }
            if let Some(t0) = manifest.effective_t0() {
                if t0 < 1 || t0 >= tensor.n_periods() {
                    report.errors.push(format!(
                        "t0 = {t0} outside 1..{}",
                        tensor.n_periods()
                    ));
                }
            }
        }
        Err(e) => report.errors.push(e.to_string()),
    }
    report.valid = report.errors.is_empty();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_lvm, LvmSpec};

    #[test]
    fn export_then_load_roundtrips_observations() {
        let bundle = generate_lvm(&LvmSpec::paper_rmse(8, 5));
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = export_bundle(&bundle, 10, dir.path()).unwrap();
        let (tensor, manifest) = load_tensor(&manifest_path).unwrap();
        assert_eq!(tensor.n_units(), 9);
        assert_eq!(tensor.n_periods(), 50);
        assert_eq!(tensor.n_metrics(), 2);
        assert_eq!(manifest.treatment.as_deref(), Some("target"));
        assert_eq!(manifest.effective_t0(), Some(10));
        // CSV text is a lossless f64 round trip.
        for k in 0..2 {
            for i in 0..9 {
                for j in 0..50 {
                    assert_eq!(tensor.get(i, j, k), bundle.tensor.get(i, j, k));
                }
            }
        }
        let gt = read_ground_truth(&dir.path().join("ground_truth.json")).unwrap();
        assert_eq!(gt.beta_star, bundle.beta_star);
        assert_eq!(gt.rng, "chacha8");
    }

    #[test]
    fn masked_cells_survive_the_roundtrip() {
        let bundle = generate_lvm(&LvmSpec::paper_rmse(6, 9));
        let masked = bundle.tensor.with_bernoulli_mask(0.6, 3, Some(0));
        let dir = tempfile::tempdir().unwrap();
        let path = export_tensor(&masked, Some("target"), Some(5), None, dir.path()).unwrap();
        let (tensor, _) = load_tensor(&path).unwrap();
        assert_eq!(tensor, masked);
    }

    #[test]
    fn validation_reports_shapes_and_missing() {
        let bundle = generate_lvm(&LvmSpec::paper_rmse(5, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = export_bundle(&bundle, 10, dir.path()).unwrap();
        let report = validate_manifest(&path);
        assert!(report.valid, "{:?}", report.errors);
        assert_eq!(report.n_units, Some(6));
        assert_eq!(report.metrics.len(), 2);
        assert_eq!(report.metrics[0].n_missing, 0);
    }

    #[test]
    fn validation_collects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "unit,p1,p2\nu0,1,2\nu1,3,4\n").unwrap();
        std::fs::write(dir.path().join("b.csv"), "unit,p1,p2,p3\nu0,1,2,3\nu1,4,5,6\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"metrics":[{"label":"a","path":"a.csv"},{"label":"b","path":"b.csv"}],"treatment":"u0","t0":1}"#,
        )
        .unwrap();
        let report = validate_manifest(&dir.path().join("manifest.json"));
        assert!(!report.valid);
        assert!(report.errors.iter().any(|e| e.contains("dimension mismatch")));
    }

    #[test]
    fn empty_csv_is_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"metrics":[{"label":"a","path":"a.csv"}]}"#,
        )
        .unwrap();
        let report = validate_manifest(&dir.path().join("manifest.json"));
        assert!(!report.valid);
        assert!(report.errors.iter().any(|e| e.contains("empty input")));

        let err = read_metric_csv(&dir.path().join("a.csv"), "a").unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn bad_cells_and_missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "unit,p1\nu0,abc\nu1,2\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"metrics":[{"label":"a","path":"a.csv"},{"label":"b","path":"nope.csv"}]}"#,
        )
        .unwrap();
        let report = validate_manifest(&dir.path().join("manifest.json"));
        assert_eq!(report.errors.len(), 2);
        assert!(report.errors[0].contains("not a number"));
    }

    #[test]
    fn period_scale_multiplies_t0() {
        let m = Manifest {
            metrics: vec![ManifestMetric {
                label: "runs".into(),
                path: "runs.csv".into(),
            }],
            treatment: None,
            t0: Some(30),
            period_scale: Some(6),
            ground_truth: None,
        };
        assert_eq!(m.effective_t0(), Some(180));
    }
}
