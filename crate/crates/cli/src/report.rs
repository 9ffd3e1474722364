//! Aggregate reports over the cell files of a run directory.
//!
//! Writes `summary.csv` (pooled over eccentricity), `by_eccentricity.csv`,
//! `per_group.csv`, `threshold_sweep.csv` and SVG plots under `plots/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use gazebench_core::metrics::{
    aggregate, default_sweep_thresholds, threshold_sweep, CellKey, GroupMetrics, MetricKind, SummaryRow,
    TaggedMetrics, ECCENTRICITY_RINGS,
};
use thiserror::Error;

use crate::format::{sig6, sig6_opt};
use crate::matrix::{CellMeta, CELLS_DIR, CELL_META_FILE, GROUPS_FILE, SAMPLES_FILE};
use crate::plot::{LineChart, Series};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BY_ECCENTRICITY_FILE: &str = "by_eccentricity.csv";
pub const PER_GROUP_FILE: &str = "per_group.csv";
pub const SWEEP_FILE: &str = "threshold_sweep.csv";
pub const PLOTS_DIR: &str = "plots";
pub const RETENTION_PLOT: &str = "retention.svg";

#[derive(Error, Debug)]
pub enum ReportError {
    #[error("no completed cells under {0}")]
    NoCells(PathBuf),
    #[error("{path}: {message}")]
    BadCell { path: PathBuf, message: String },
    #[error("retention curve for {0} is not monotone")]
    NonMonotone(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedGroup {
    pub target_id: usize,
    pub repeat: usize,
    pub eccentricity: f64,
    pub truth_azimuth: f64,
    pub truth_elevation: f64,
    pub metrics: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCell {
    pub meta: CellMeta,
    pub groups: Vec<LoadedGroup>,
    /// Per-sample angular errors; `None` marks a detection dropout.
    pub sample_errors: Vec<Option<f64>>,
}

impl LoadedCell {
    fn key(&self, eccentricity: Option<u32>) -> CellKey {
        CellKey {
            detector: self.meta.id.detector.name().into(),
            gazer: self.meta.id.gazer.name().into(),
            resolution: self.meta.id.resolution.clone(),
            eccentricity,
        }
    }
}

fn bad(path: &Path, message: impl Into<String>) -> ReportError {
    ReportError::BadCell {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_csv(path: &Path) -> Result<Vec<csv::StringRecord>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(path, e.to_string()))?;
    r.records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(path, e.to_string()))
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T, ReportError> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(path, format!("bad field {i} in {rec:?}")))
}

fn opt_field(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<Option<f64>, ReportError> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(path, rec, i).map(Some),
    }
}

fn load_cell(dir: &Path) -> Result<LoadedCell, ReportError> {
    let meta_path = dir.join(CELL_META_FILE);
    let meta: CellMeta =
        toml::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| bad(&meta_path, e.to_string()))?;
    let gpath = dir.join(GROUPS_FILE);
    let groups = read_csv(&gpath)?
        .iter()
        .map(|r| {
            Ok(LoadedGroup {
                target_id: field(&gpath, r, 0)?,
                repeat: field(&gpath, r, 1)?,
                eccentricity: field(&gpath, r, 2)?,
                truth_azimuth: field(&gpath, r, 3)?,
                truth_elevation: field(&gpath, r, 4)?,
                metrics: GroupMetrics {
                    n_total: field(&gpath, r, 5)?,
                    n_retained: field(&gpath, r, 6)?,
                    dropout_rate: field(&gpath, r, 7)?,
                    err_acc: opt_field(&gpath, r, 8)?,
                    err_prec: opt_field(&gpath, r, 9)?,
                },
            })
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    let spath = dir.join(SAMPLES_FILE);
    let sample_errors = read_csv(&spath)?
        .iter()
        .map(|r| opt_field(&spath, r, 5))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedCell {
        meta,
        groups,
        sample_errors,
    })
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, io::Error> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Loads every completed cell, ordered by cell identity.
pub fn load_cells(out: &Path) -> Result<Vec<LoadedCell>, ReportError> {
    let root = out.join(CELLS_DIR);
    if !root.is_dir() {
        return Err(ReportError::NoCells(out.to_path_buf()));
    }
    let mut cells = Vec::new();
    for rec_dir in sorted_subdirs(&root)? {
        for cell_dir in sorted_subdirs(&rec_dir)? {
            cells.push(load_cell(&cell_dir)?);
        }
    }
    if cells.is_empty() {
        return Err(ReportError::NoCells(out.to_path_buf()));
    }
    cells.sort_by(|a, b| a.meta.id.cmp(&b.meta.id));
    Ok(cells)
}

fn tagged(cells: &[LoadedCell]) -> Vec<TaggedMetrics> {
    let mut out = Vec::new();
    for c in cells {
        for g in &c.groups {
            for ecc in [None, Some(g.eccentricity.round() as u32)] {
                out.push(TaggedMetrics {
                    key: c.key(ecc),
                    subject: c.meta.id.subject.clone(),
                    metrics: g.metrics,
                });
            }
        }
    }
    out
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("detector,gazer,resolution,metric,mean,std_error,n_subjects\n");
    for r in rows.iter().filter(|r| r.key.eccentricity.is_none()) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.key.detector,
            r.key.gazer,
            r.key.resolution,
            r.metric.name(),
            sig6(r.mean),
            sig6(r.std_error),
            r.n_subjects
        );
    }
    s
}

fn by_eccentricity_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("detector,gazer,resolution,eccentricity,metric,mean,std_error,ci95_half_width,n_subjects\n");
    for r in rows {
        let Some(ecc) = r.key.eccentricity else {
            continue;
        };
        let _ = writeln!(
            s,
            "{},{},{},{ecc},{},{},{},{},{}",
            r.key.detector,
            r.key.gazer,
            r.key.resolution,
            r.metric.name(),
            sig6(r.mean),
            sig6(r.std_error),
            sig6(r.ci95_half_width()),
            r.n_subjects
        );
    }
    s
}

fn per_group_csv(cells: &[LoadedCell]) -> String {
    let mut s = String::from(
        "recording,subject,detector,gazer,resolution,target_id,repeat,eccentricity,truth_azimuth,\
truth_elevation,n_total,n_retained,dropout_rate,accuracy_error,precision_error\n",
    );
    for c in cells {
        let id = &c.meta.id;
        for g in &c.groups {
            let m = &g.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                id.recording,
                id.subject,
                id.detector,
                id.gazer,
                id.resolution,
                g.target_id,
                g.repeat,
                sig6(g.eccentricity),
                sig6(g.truth_azimuth),
                sig6(g.truth_elevation),
                m.n_total,
                m.n_retained,
                sig6(m.dropout_rate),
                sig6_opt(m.err_acc),
                sig6_opt(m.err_prec)
            );
        }
    }
    s
}

/// Retention curve per (detector, gazer, resolution), pooling samples over recordings.
pub fn sweep_curves(cells: &[LoadedCell]) -> Result<BTreeMap<CellKey, Vec<(f64, f64)>>, ReportError> {
    let mut pooled: BTreeMap<CellKey, Vec<Option<f64>>> = BTreeMap::new();
    for c in cells {
        pooled.entry(c.key(None)).or_default().extend(c.sample_errors.iter().copied());
    }
    let thresholds = default_sweep_thresholds();
    let mut out = BTreeMap::new();
    for (key, errors) in pooled {
        let curve = threshold_sweep(&errors, &thresholds);
        if curve.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(ReportError::NonMonotone(series_name(&key)));
        }
        out.insert(key, curve);
    }
    Ok(out)
}

fn series_name(k: &CellKey) -> String {
    format!("{} / {} / {}", k.detector, k.gazer, k.resolution)
}

fn sweep_csv(curves: &BTreeMap<CellKey, Vec<(f64, f64)>>) -> String {
    let mut s = String::from("detector,gazer,resolution,threshold_deg,retained_pct\n");
    for (k, curve) in curves {
        for (t, pct) in curve {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                k.detector,
                k.gazer,
                k.resolution,
                sig6(*t),
                sig6(*pct)
            );
        }
    }
    s
}

fn retention_chart(curves: &BTreeMap<CellKey, Vec<(f64, f64)>>) -> LineChart {
    let thresholds = default_sweep_thresholds();
    LineChart {
        title: "Retained samples vs. dropout threshold".into(),
        x_label: "dropout threshold (deg)".into(),
        y_label: "retained (%)".into(),
        x_ticks: thresholds.iter().copied().filter(|t| (*t as u32).is_multiple_of(10)).collect(),
        series: curves
            .iter()
            .map(|(k, c)| Series {
                name: series_name(k),
                points: c.clone(),
                band: Vec::new(),
            })
            .collect(),
    }
}

fn eccentricity_chart(rows: &[SummaryRow], metric: MetricKind) -> LineChart {
    let mut by_cell: BTreeMap<CellKey, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        if r.key.eccentricity.is_some() {
            let k = CellKey {
                eccentricity: None,
                ..r.key.clone()
            };
            by_cell.entry(k).or_default().push(r);
        }
    }
    let unit = if metric == MetricKind::DropoutRate {
        "ratio"
    } else {
        "deg"
    };
    LineChart {
        title: format!("{} by eccentricity (mean, 95% CI)", metric.name()),
        x_label: "eccentricity (deg)".into(),
        y_label: format!("{} ({unit})", metric.name()),
        x_ticks: ECCENTRICITY_RINGS.to_vec(),
        series: by_cell
            .into_iter()
            .map(|(k, rs)| {
                let x = |r: &SummaryRow| r.key.eccentricity.unwrap_or(0) as f64;
                Series {
                    name: series_name(&k),
                    points: rs.iter().map(|r| (x(r), r.mean)).collect(),
                    band: rs
                        .iter()
                        .map(|r| (x(r), r.mean - r.ci95_half_width(), r.mean + r.ci95_half_width()))
                        .collect(),
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub cells: usize,
    pub summary_rows: usize,
}

/// Writes the sweep CSV and retention plot only.
pub fn emit_sweep(out: &Path) -> Result<usize, ReportError> {
    write_sweep(out, &load_cells(out)?)
}

fn write_sweep(out: &Path, cells: &[LoadedCell]) -> Result<usize, ReportError> {
    let curves = sweep_curves(cells)?;
    fs::write(out.join(SWEEP_FILE), sweep_csv(&curves))?;
    fs::create_dir_all(out.join(PLOTS_DIR))?;
    fs::write(out.join(PLOTS_DIR).join(RETENTION_PLOT), retention_chart(&curves).render())?;
    Ok(curves.len())
}

pub fn emit_report(out: &Path) -> Result<ReportSummary, ReportError> {
    let cells = load_cells(out)?;
    let rows = aggregate(&tagged(&cells));
    let summary = summary_csv(&rows);
    fs::write(out.join(SUMMARY_FILE), &summary)?;
    fs::write(out.join(BY_ECCENTRICITY_FILE), by_eccentricity_csv(&rows))?;
    fs::write(out.join(PER_GROUP_FILE), per_group_csv(&cells))?;
    let plots = out.join(PLOTS_DIR);
    fs::create_dir_all(&plots)?;
    for metric in MetricKind::ALL {
        fs::write(
            plots.join(format!("{}_by_eccentricity.svg", metric.name())),
            eccentricity_chart(&rows, metric).render(),
        )?;
    }
    write_sweep(out, &cells)?;
    Ok(ReportSummary {
        cells: cells.len(),
        summary_rows: summary.lines().count() - 1,
    })
}
