//! End-to-end runs: load or synthesize profiles, extract features, split,
//! select, train, evaluate and write reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ks_two_sample, load_dataset, map_csv_io, split, write_availability_mask, write_dataset, write_feature_table,
    ColumnSchema, FeatureTable, KsResult, QvProfile, SampleId, SplitSpec,
};
use crate::error::{Error, Result};
use crate::features::{extract_all, ExtractionConfig, FeatureLayout, ProfileFeatures, DEFAULT_WINDOW_HALF_WIDTH};
use crate::rvr::{self, heuristic_rho, Metrics, RvrConfig, RvrModel, SohEstimate};
use crate::select::{select_features, write_removed, write_selection, write_trace, Selection, SelectionConfig};
use crate::synth::{synth_dataset, write_truth, AgingSpec, CellSpec};

pub const DEFAULT_GATE_SAMPLES: usize = 8;
pub const DEFAULT_RHO_MULTIPLIERS: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];
pub const GATE_REASON: &str = "insufficient charging range";

/// A profile left out of the feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub id: SampleId,
    pub reason: String,
}

/// Keeps profiles with at least `min_samples` raw voltage samples within
/// `half_width` of their dominant IC peak. Failed extractions are skipped
/// with their error message. `profiles` and `extracted` are parallel.
pub fn apply_gate(
    profiles: &[QvProfile],
    extracted: Vec<Result<ProfileFeatures>>,
    min_samples: usize,
    half_width: f64,
) -> (Vec<ProfileFeatures>, Vec<Skipped>) {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (profile, result) in profiles.iter().zip(extracted) {
        match result {
            Err(e) => skipped.push(Skipped {
                id: profile.id(),
                reason: e.to_string(),
            }),
            Ok(p) => {
                let inside = p.dominant_peak().map_or(0, |peak| {
                    profile
                        .voltage()
                        .iter()
                        .filter(|v| (**v - peak.location).abs() <= half_width)
                        .count()
                });
                if inside >= min_samples && inside > 0 {
                    kept.push(p);
                } else {
                    skipped.push(Skipped {
                        id: profile.id(),
                        reason: GATE_REASON.into(),
                    });
                }
            }
        }
    }
    (kept, skipped)
}

pub fn write_skipped(path: &Path, skipped: &[Skipped]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["source_id", "cycle", "reason"])?;
    for s in skipped {
        w.write_record([s.id.source_id.as_str(), &s.id.cycle.to_string(), &s.reason])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Design rows and labels for `names`, dropping rows with any masked entry.
/// Returns the kept row indices as well.
pub fn design_rows(table: &FeatureTable, names: &[String]) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>, Vec<usize>)> {
    let sub = table.select_columns(names)?;
    let all: Vec<usize> = (0..sub.n_features()).collect();
    let keep = sub.complete_rows(&all);
    let x = keep.iter().map(|&i| sub.rows()[i].clone()).collect();
    let y = sub.labels().map(|l| keep.iter().map(|&i| l[i]).collect());
    Ok((x, y, keep))
}

/// Trains on the complete rows of `table` restricted to `names`.
pub fn train_on(table: &FeatureTable, names: &[String], config: &RvrConfig) -> Result<(RvrModel, rvr::TrainReport)> {
    let (x, y, _) = design_rows(table, names)?;
    let y = y.ok_or_else(|| Error::Argument("training table has no labels".into()))?;
    rvr::train(&x, &y, names, config)
}

/// Predictions for the complete rows of `table` on the model's features,
/// paired with the row index.
pub fn predict_table(model: &RvrModel, table: &FeatureTable) -> Result<Vec<(usize, SohEstimate)>> {
    if model.feature_names.is_empty() {
        return Err(Error::ModelFormat("model has no feature names".into()));
    }
    let (x, _, keep) = design_rows(table, &model.feature_names)?;
    let est = model.predict_all(&x)?;
    Ok(keep.into_iter().zip(est).collect())
}

pub fn write_predictions(path: &Path, table: &FeatureTable, predictions: &[(usize, SohEstimate)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["source_id", "cycle", "soh", "soh_mean", "soh_sigma", "lower_3sigma", "upper_3sigma"])?;
    let labels = table.labels();
    for (i, e) in predictions {
        let id = &table.ids()[*i];
        w.write_record([
            id.source_id.clone(),
            id.cycle.to_string(),
            labels.map(|l| l[*i].to_string()).unwrap_or_default(),
            e.mean.to_string(),
            e.sigma.to_string(),
            e.interval.0.to_string(),
            e.interval.1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labeled estimates for evaluation.
pub fn labeled(table: &FeatureTable, predictions: &[(usize, SohEstimate)]) -> Result<(Vec<SohEstimate>, Vec<f64>)> {
    let labels = table.require_labels()?;
    Ok(predictions.iter().map(|(i, e)| (*e, labels[*i])).unzip())
}

// ---------------------------------------------------------------- crossval

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub n_features: Vec<usize>,
    /// Multiples of the median-heuristic kernel parameter of each fold.
    pub rho_multipliers: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub rvr: RvrConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_features: vec![1, 2, 3, 4, 5],
            rho_multipliers: DEFAULT_RHO_MULTIPLIERS.to_vec(),
            folds: 5,
            seed: 0,
            rvr: RvrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvFold {
    pub fold: usize,
    pub rho: f64,
    pub rmse: f64,
    pub n_rv: usize,
    pub avg_three_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub n_features: usize,
    pub rho_multiplier: f64,
    pub folds: Vec<CvFold>,
    pub mean_rmse: f64,
    pub mean_n_rv: f64,
    pub mean_three_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
}

impl CvReport {
    /// Row with the lowest mean validation RMSE (first on ties).
    pub fn best(&self) -> Option<&CvRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&CvRow>, r| match best {
                Some(b) if b.mean_rmse <= r.mean_rmse => Some(b),
                _ => Some(r),
            })
    }
}

/// Fold label of every row: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// K-fold cross-validation of RVR over prefixes of `ranked` and multiples
/// of the heuristic kernel parameter.
pub fn cross_validate(table: &FeatureTable, ranked: &[String], config: &CvConfig) -> Result<CvReport> {
    if config.folds < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {}", config.folds)));
    }
    if config.n_features.is_empty() || config.rho_multipliers.is_empty() {
        return Err(Error::Argument("cross-validation grids must be non-empty".into()));
    }
    if let Some(&m) = config.n_features.iter().find(|&&m| m == 0 || m > ranked.len()) {
        return Err(Error::Argument(format!(
            "feature count {m} outside 1..={}",
            ranked.len()
        )));
    }
    if let Some(r) = config.rho_multipliers.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Argument(format!("rho multiplier must be positive, got {r}")));
    }
    table.require_labels()?;
    let assignment = fold_assignment(table.n_rows(), config.folds, config.seed);
    for f in 0..config.folds {
        let count = assignment.iter().filter(|&&a| a == f).count();
        if count < 2 {
            return Err(Error::Argument(format!("fold {f} has {count} samples; need at least 2")));
        }
    }

    let mut cells = Vec::new();
    for &m in &config.n_features {
        for &mult in &config.rho_multipliers {
            for f in 0..config.folds {
                cells.push((m, mult, f));
            }
        }
    }
    let results: Vec<CvFold> = cells
        .par_iter()
        .map(|&(m, mult, f)| {
            let names = &ranked[..m];
            let train_idx: Vec<usize> = (0..table.n_rows()).filter(|&i| assignment[i] != f).collect();
            let val_idx: Vec<usize> = (0..table.n_rows()).filter(|&i| assignment[i] == f).collect();
            let train = table.select_rows(&train_idx);
            let val = table.select_rows(&val_idx);
            let (x, _, _) = design_rows(&train, names)?;
            let rho = mult * heuristic_rho(&x)?;
            let cfg = RvrConfig {
                rho: Some(rho),
                ..config.rvr
            };
            let (model, _) = train_on(&train, names, &cfg)?;
            let pred = predict_table(&model, &val)?;
            let (est, y) = labeled(&val, &pred)?;
            let metrics = rvr::metrics(&est, &y)?;
            Ok(CvFold {
                fold: f,
                rho,
                rmse: metrics.rmse,
                n_rv: model.n_relevance_vectors(),
                avg_three_sigma: metrics.avg_three_sigma,
            })
        })
        .collect::<Result<_>>()?;

    let rows = results
        .chunks(config.folds)
        .zip(cells.chunks(config.folds))
        .map(|(folds, cell)| {
            let k = folds.len() as f64;
            CvRow {
                n_features: cell[0].0,
                rho_multiplier: cell[0].1,
                folds: folds.to_vec(),
                mean_rmse: folds.iter().map(|f| f.rmse).sum::<f64>() / k,
                mean_n_rv: folds.iter().map(|f| f.n_rv as f64).sum::<f64>() / k,
                mean_three_sigma: folds.iter().map(|f| f.avg_three_sigma).sum::<f64>() / k,
            }
        })
        .collect();
    Ok(CvReport { rows })
}

pub fn write_cv_summary(path: &Path, report: &CvReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["n_features", "rho_multiplier", "mean_rmse", "mean_n_rv", "mean_three_sigma"])?;
    for r in &report.rows {
        w.write_record([
            r.n_features.to_string(),
            r.rho_multiplier.to_string(),
            r.mean_rmse.to_string(),
            r.mean_n_rv.to_string(),
            r.mean_three_sigma.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cv_folds(path: &Path, report: &CvReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["n_features", "rho_multiplier", "fold", "rho", "rmse", "n_rv", "avg_three_sigma"])?;
    for r in &report.rows {
        for f in &r.folds {
            w.write_record([
                r.n_features.to_string(),
                r.rho_multiplier.to_string(),
                f.fold.to_string(),
                f.rho.to_string(),
                f.rmse.to_string(),
                f.n_rv.to_string(),
                f.avg_three_sigma.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------------ report

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]` of `values`; the last bin is
/// closed so every value is counted once.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::EmptyOutput("no values to bin".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1e-12_f64.max(lo.abs() * 1e-12);
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lower: lo + b as f64 * width,
            upper: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        out[b].count += 1;
    }
    Ok(out)
}

pub fn write_histogram(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record(["lower_pct", "upper_pct", "count"])?;
    for b in bins {
        w.write_record([b.lower.to_string(), b.upper.to_string(), b.count.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test metrics of one model, in percent SOH where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub n_features: usize,
    pub metrics: Metrics,
    pub n_rv: usize,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| map_csv_io(path, e))?;
    w.write_record([
        "model",
        "n_features",
        "n",
        "rmse_pct",
        "avg_three_sigma_pct",
        "coverage_997",
        "n_rv",
    ])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.n_features.to_string(),
            r.metrics.n.to_string(),
            (100.0 * r.metrics.rmse).to_string(),
            (100.0 * r.metrics.avg_three_sigma).to_string(),
            r.metrics.coverage_997.to_string(),
            r.n_rv.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Errors `mean - label` in percent SOH.
pub fn errors_pct(estimates: &[SohEstimate], labels: &[f64]) -> Vec<f64> {
    estimates.iter().zip(labels).map(|(e, y)| 100.0 * (e.mean - y)).collect()
}

fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Human-readable rank and metrics tables.
pub fn render_report(selection: Option<&Selection>, metrics: &[MetricsRow], notes: &[String]) -> String {
    let mut out = String::new();
    if let Some(sel) = selection {
        out.push_str("Selected features\n\n");
        let rows: Vec<Vec<String>> = sel
            .selected
            .iter()
            .enumerate()
            .map(|(i, s)| {
                vec![
                    (i + 1).to_string(),
                    s.name.clone(),
                    fmt_opt(s.score.map(|c| c.j)),
                    fmt_opt(s.score.map(|c| c.relevance)),
                    fmt_opt(s.score.map(|c| c.avg_redundancy)),
                    fmt_opt(s.score.map(|c| c.avg_complementarity)),
                ]
            })
            .collect();
        out.push_str(&text_table(
            &["rank", "feature", "J", "relevance", "redundancy", "complementarity"],
            &rows,
        ));
        if !sel.removed.is_empty() {
            let removed: Vec<String> = sel
                .removed
                .iter()
                .map(|r| format!("{} (by {})", r.name, r.removed_by))
                .collect();
            let _ = writeln!(out, "\nRemoved: {}", removed.join(", "));
        }
        out.push('\n');
    }
    if !metrics.is_empty() {
        out.push_str("Test metrics\n\n");
        let rows: Vec<Vec<String>> = metrics
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.n_features.to_string(),
                    r.metrics.n.to_string(),
                    format!("{:.3}", 100.0 * r.metrics.rmse),
                    format!("{:.3}", 100.0 * r.metrics.avg_three_sigma),
                    format!("{:.3}", r.metrics.coverage_997),
                    r.n_rv.to_string(),
                ]
            })
            .collect();
        out.push_str(&text_table(
            &["model", "features", "n", "rmse %", "avg 3sigma %", "coverage", "N_rv"],
            &rows,
        ));
    }
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out.push_str(n);
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset CSV; when absent the synthetic generator is used.
    pub dataset: Option<PathBuf>,
    pub synth: AgingSpec,
    pub extraction: ExtractionConfig,
    pub k: usize,
    pub seed: u64,
    pub threshold: f64,
    pub preselected: Vec<String>,
    /// Top-ranked features used by the final model.
    pub n_features: usize,
    pub train_fraction: f64,
    /// Minimum raw samples within `gate_half_width` of the dominant peak.
    pub gate_min_samples: usize,
    pub gate_half_width: f64,
    /// Pick the kernel parameter by five-fold CV on the training split.
    pub cross_validate_rho: bool,
    pub rvr: RvrConfig,
    pub histogram_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synth: AgingSpec::default(),
            extraction: ExtractionConfig::default(),
            k: crate::select::DEFAULT_K,
            seed: 0,
            threshold: crate::select::DEFAULT_THRESHOLD,
            preselected: Vec::new(),
            n_features: 2,
            train_fraction: 0.8,
            gate_min_samples: DEFAULT_GATE_SAMPLES,
            gate_half_width: DEFAULT_WINDOW_HALF_WIDTH,
            cross_validate_rho: false,
            rvr: RvrConfig::default(),
            histogram_bins: 10,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::Argument("n_features must be at least 1".into()));
        }
        if !(self.gate_half_width > 0.0) {
            return Err(Error::Argument("gate_half_width must be positive".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Argument("histogram_bins must be at least 1".into()));
        }
        self.extraction.validate()?;
        self.rvr.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Argument(format!("pipeline config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCountRow {
    pub n_features: usize,
    pub metrics: Metrics,
    pub n_rv: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub n_profiles: usize,
    pub skipped: Vec<Skipped>,
    pub n_table_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Rows dropped from the train and test sides for missing features.
    pub n_incomplete: usize,
    pub label_ks: KsResult,
    pub selection: Selection,
    pub features_used: Vec<String>,
    pub rho: f64,
    pub n_rv: usize,
    pub converged: bool,
    pub test: Metrics,
    pub feature_count: Vec<FeatureCountRow>,
    pub cv: Option<CvReport>,
    pub artifacts: Vec<PathBuf>,
}

/// Paths written so far; removed again if the run fails.
struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn remove_all(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Runs every stage, writing artifacts into `out_dir`. On failure the
/// error names the stage and files written by this run are removed.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<RunReport> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e).in_stage("config"))?;
    let mut artifacts = Artifacts {
        dir: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    match run_stages(config, &mut artifacts) {
        Ok(mut report) => {
            report.artifacts = artifacts.written;
            Ok(report)
        }
        Err(e) => {
            artifacts.remove_all();
            Err(e)
        }
    }
}

fn run_stages(config: &PipelineConfig, out: &mut Artifacts) -> Result<RunReport> {
    // 1. Profiles.
    let profiles = (|| -> Result<Vec<QvProfile>> {
        match &config.dataset {
            Some(path) => Ok(load_dataset(path, &ColumnSchema::default())?.profiles),
            None => {
                let data = synth_dataset(&config.synth, &CellSpec::default())?;
                write_dataset(&out.path("dataset.csv"), &data.profiles)?;
                write_truth(&out.path("truth.csv"), &data.truth)?;
                Ok(data.profiles)
            }
        }
    })()
    .map_err(|e| e.in_stage("load"))?;
    let n_profiles = profiles.len();

    // 2. Features.
    let (table, skipped) = (|| -> Result<(FeatureTable, Vec<Skipped>)> {
        let extracted = extract_all(&profiles, &config.extraction);
        let (kept, skipped) = apply_gate(&profiles, extracted, config.gate_min_samples, config.gate_half_width);
        write_skipped(&out.path("skipped.csv"), &skipped)?;
        if kept.is_empty() {
            return Err(Error::EmptyOutput(format!(
                "all {n_profiles} profiles skipped (first reason: {})",
                skipped.first().map_or("none", |s| s.reason.as_str())
            )));
        }
        let layout = FeatureLayout::from_reference(&kept)?;
        let table = layout.assemble(&kept)?;
        layout.write(&out.path("layout.toml"))?;
        write_feature_table(&out.path("features.csv"), &table)?;
        write_availability_mask(&out.path("mask.csv"), &table)?;
        Ok((table, skipped))
    })()
    .map_err(|e| e.in_stage("extract"))?;

    // 3. Split.
    let (parts, label_ks) = (|| -> Result<_> {
        table.require_labels()?;
        let parts = split(&table, &SplitSpec::random(config.train_fraction, config.seed))?;
        let ks = ks_two_sample(parts.train.require_labels()?, parts.test.require_labels()?)?;
        Ok((parts, ks))
    })()
    .map_err(|e| e.in_stage("split"))?;

    // 4. Selection on the training side.
    let selection = (|| -> Result<Selection> {
        let sel = select_features(
            &parts.train,
            &SelectionConfig {
                threshold: config.threshold,
                k: config.k,
                seed: config.seed,
                preselected: config.preselected.clone(),
            },
        )?;
        write_selection(&out.path("selection.csv"), &sel)?;
        write_removed(&out.path("removed.csv"), &sel)?;
        write_trace(&out.path("trace.csv"), &sel.trace)?;
        if config.n_features > sel.selected.len() {
            return Err(Error::Argument(format!(
                "n_features = {} exceeds the {} selected features",
                config.n_features,
                sel.selected.len()
            )));
        }
        Ok(sel)
    })()
    .map_err(|e| e.in_stage("select"))?;
    let ranked = selection.ranked_names();
    let features_used = ranked[..config.n_features].to_vec();

    // 5. Kernel parameter.
    let (rvr_config, cv) = (|| -> Result<(RvrConfig, Option<CvReport>)> {
        if !config.cross_validate_rho || config.rvr.rho.is_some() {
            return Ok((config.rvr, None));
        }
        let cv = cross_validate(
            &parts.train,
            &ranked,
            &CvConfig {
                n_features: vec![config.n_features],
                seed: config.seed,
                rvr: config.rvr,
                ..CvConfig::default()
            },
        )?;
        write_cv_summary(&out.path("cv_summary.csv"), &cv)?;
        write_cv_folds(&out.path("cv_folds.csv"), &cv)?;
        let mult = cv.best().map_or(1.0, |r| r.rho_multiplier);
        let (x, _, _) = design_rows(&parts.train, &features_used)?;
        let rho = mult * heuristic_rho(&x)?;
        Ok((
            RvrConfig {
                rho: Some(rho),
                ..config.rvr
            },
            Some(cv),
        ))
    })()
    .map_err(|e| e.in_stage("crossval"))?;

    // 6. Train.
    let model = (|| -> Result<RvrModel> {
        let (model, _) = train_on(&parts.train, &features_used, &rvr_config)?;
        model.write(&out.path("model.toml"))?;
        Ok(model)
    })()
    .map_err(|e| e.in_stage("train"))?;

    // 7. Evaluate.
    let (test, errors, n_incomplete, feature_count) = (|| -> Result<_> {
        let pred = predict_table(&model, &parts.test)?;
        write_predictions(&out.path("predictions.csv"), &parts.test, &pred)?;
        let (est, y) = labeled(&parts.test, &pred)?;
        let test = rvr::metrics(&est, &y)?;
        let (xtr, _, _) = design_rows(&parts.train, &features_used)?;
        let n_incomplete = parts.train.n_rows() - xtr.len() + parts.test.n_rows() - pred.len();
        let feature_count = (1..=ranked.len().min(10))
            .map(|m| {
                let names = &ranked[..m];
                let (mm, _) = train_on(&parts.train, names, &config.rvr)?;
                let p = predict_table(&mm, &parts.test)?;
                let (e, yy) = labeled(&parts.test, &p)?;
                Ok(FeatureCountRow {
                    n_features: m,
                    metrics: rvr::metrics(&e, &yy)?,
                    n_rv: mm.n_relevance_vectors(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((test, errors_pct(&est, &y), n_incomplete, feature_count))
    })()
    .map_err(|e| e.in_stage("evaluate"))?;

    // 8. Reports.
    (|| -> Result<()> {
        let mut rows = vec![MetricsRow {
            label: "final".into(),
            n_features: features_used.len(),
            metrics: test,
            n_rv: model.n_relevance_vectors(),
        }];
        rows.extend(feature_count.iter().map(|r| MetricsRow {
            label: format!("top_{}", r.n_features),
            n_features: r.n_features,
            metrics: r.metrics,
            n_rv: r.n_rv,
        }));
        write_metrics(&out.path("metrics.csv"), &rows[..1])?;
        write_metrics(&out.path("feature_count.csv"), &rows[1..])?;
        write_histogram(&out.path("error_histogram.csv"), &histogram(&errors, config.histogram_bins)?)?;
        let notes = vec![
            format!(
                "profiles: {n_profiles} read, {} skipped, {} in feature table",
                skipped.len(),
                table.n_rows()
            ),
            format!(
                "split: {} train, {} test, label KS statistic {:.4} (p = {:.4})",
                parts.train.n_rows(),
                parts.test.n_rows(),
                label_ks.statistic,
                label_ks.p_value
            ),
            format!("rows dropped for missing features: {n_incomplete}"),
            format!(
                "model: features [{}], rho {:.6}, {} relevance vectors, converged {}",
                features_used.join(", "),
                model.rho,
                model.n_relevance_vectors(),
                model.converged
            ),
        ];
        let text = render_report(Some(&selection), &rows, &notes);
        let path = out.path("report.txt");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    })()
    .map_err(|e| e.in_stage("report"))?;

    Ok(RunReport {
        n_profiles,
        n_table_rows: table.n_rows(),
        skipped,
        n_train: parts.train.n_rows(),
        n_test: parts.test.n_rows(),
        n_incomplete,
        label_ks,
        selection,
        rho: model.rho,
        n_rv: model.n_relevance_vectors(),
        converged: model.converged,
        features_used,
        test,
        feature_count,
        cv,
        artifacts: Vec::new(),
    })
}
