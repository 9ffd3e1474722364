//! Detector × gazer matrix over a set of recordings.
//!
//! Results land in `<out>/cells/<recording>/<detector>__<gazer>/` as
//! `cell.toml`, `groups.csv` and `samples.csv`; failed cells are listed in
//! `<out>/errors.csv` instead.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use gazebench_core::recording::{ingest_recording, Recording, RecordingError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DetectorKind, GazerKind, RunConfig};
use crate::format::{sig6, sig6_opt};
use crate::pipeline::{detect_stream, run_gazer, CellError, CellResult};

pub const CELLS_DIR: &str = "cells";
pub const ERRORS_FILE: &str = "errors.csv";
pub const CELL_META_FILE: &str = "cell.toml";
pub const GROUPS_FILE: &str = "groups.csv";
pub const SAMPLES_FILE: &str = "samples.csv";

pub const GROUPS_HEADER: &str = "target_id,repeat,eccentricity,truth_azimuth,truth_elevation,n_total,n_retained,\
dropout_rate,accuracy_error,precision_error";
pub const SAMPLES_HEADER: &str = "target_id,repeat,timestamp_s,azimuth,elevation,error_deg";

#[derive(Error, Debug)]
pub enum MatrixError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot ingest {path}: {source}")]
    Ingest { path: PathBuf, source: RecordingError },
    #[error("all {0} cells failed; see errors.csv")]
    AllCellsFailed(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Identity of one (recording, detector, gazer) cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub recording: String,
    pub subject: String,
    pub resolution: String,
    pub detector: DetectorKind,
    pub gazer: GazerKind,
}

impl CellId {
    pub fn dir_name(&self) -> String {
        format!("{}__{}", self.detector.name(), self.gazer.name())
    }
}

/// Contents of `cell.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    #[serde(flatten)]
    pub id: CellId,
    pub dropout_threshold: f64,
    pub calibration_pairs: usize,
    pub fit_rms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eyeball_center: Option<[f64; 3]>,
    pub observations_used: usize,
    pub iterations: usize,
    pub selection_flips: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_residual_deg: Option<f64>,
}

/// A failed cell as recorded in errors.csv.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellFailure {
    pub kind: &'static str,
    pub message: String,
}

impl From<CellError> for CellFailure {
    fn from(e: CellError) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

pub struct CellOutcome {
    pub id: CellId,
    pub result: Result<CellResult, CellFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixSummary {
    pub cells: usize,
    pub errored: usize,
}

/// Ingests every recording, failing on the first invalid one.
pub fn ingest_all(paths: &[PathBuf]) -> Result<Vec<Recording>, MatrixError> {
    let recs: Vec<Recording> = paths
        .iter()
        .map(|p| {
            ingest_recording(p).map_err(|source| MatrixError::Ingest {
                path: p.clone(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut names: Vec<&str> = recs.iter().map(|r| r.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(ConfigError::Invalid(format!("two recordings share the name {:?}", w[0])).into());
    }
    Ok(recs)
}

/// All cells of one recording. Detection runs once per detector.
pub fn run_recording(rec: &Recording, cfg: &RunConfig) -> Vec<CellOutcome> {
    let params = cfg.params_for(&rec.meta.resolution);
    let mut out = Vec::new();
    for &detector in &cfg.detectors {
        let stream = detect_stream(rec, detector, &params).map_err(CellFailure::from);
        for &gazer in &cfg.gazers {
            let id = CellId {
                recording: rec.name.clone(),
                subject: rec.meta.subject_id.clone(),
                resolution: rec.meta.resolution.clone(),
                detector,
                gazer,
            };
            let result = match &stream {
                Ok(obs) => run_gazer(rec, obs, gazer, cfg).map_err(CellFailure::from),
                Err(e) => Err(e.clone()),
            };
            out.push(CellOutcome { id, result });
        }
    }
    out
}

pub fn run_all(recs: &[Recording], cfg: &RunConfig) -> Vec<CellOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .expect("thread pool");
    let mut outcomes: Vec<CellOutcome> =
        pool.install(|| recs.par_iter().flat_map_iter(|r| run_recording(r, cfg)).collect());
    outcomes.sort_by(|a, b| a.id.cmp(&b.id));
    outcomes
}

fn groups_csv(res: &CellResult) -> String {
    let mut s = String::from(GROUPS_HEADER);
    s.push('\n');
    for g in &res.groups {
        let m = &g.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            g.target_id,
            g.repeat,
            sig6(g.group.eccentricity_bin),
            sig6(g.group.truth.azimuth),
            sig6(g.group.truth.elevation),
            m.n_total,
            m.n_retained,
            sig6(m.dropout_rate),
            sig6_opt(m.err_acc),
            sig6_opt(m.err_prec),
        );
    }
    s
}

fn samples_csv(res: &CellResult, cfg: &RunConfig) -> String {
    let mut s = String::from(SAMPLES_HEADER);
    s.push('\n');
    for g in &res.groups {
        for smp in &g.group.samples {
            let (az, el, err) = match smp.direction {
                Some(d) => (
                    sig6(d.azimuth),
                    sig6(d.elevation),
                    sig6(cfg.angular_metric.distance(&g.group.truth, &d)),
                ),
                None => Default::default(),
            };
            let _ = writeln!(s, "{},{},{},{az},{el},{err}", g.target_id, g.repeat, sig6(smp.timestamp));
        }
    }
    s
}

fn cell_meta(id: &CellId, res: &CellResult, cfg: &RunConfig) -> CellMeta {
    let d = &res.diagnostics;
    CellMeta {
        id: id.clone(),
        dropout_threshold: cfg.dropout_threshold,
        calibration_pairs: d.calibration_pairs,
        fit_rms: d.fit_rms,
        eyeball_center: d.eyeball_center,
        observations_used: d.observations_used,
        iterations: d.iterations,
        selection_flips: d.selection_flips,
        converged: d.converged,
        alignment_residual_deg: d.alignment_residual_deg,
    }
}

pub fn cell_dir(out: &Path, id: &CellId) -> PathBuf {
    out.join(CELLS_DIR).join(&id.recording).join(id.dir_name())
}

/// Writes cell files and errors.csv. Any previous `cells/` tree is replaced.
pub fn write_outcomes(out: &Path, outcomes: &[CellOutcome], cfg: &RunConfig) -> Result<MatrixSummary, MatrixError> {
    let cells = out.join(CELLS_DIR);
    if cells.exists() {
        fs::remove_dir_all(&cells)?;
    }
    fs::create_dir_all(&cells)?;
    let mut errors = String::from("recording,subject,resolution,detector,gazer,error_kind,message\n");
    let mut errored = 0;
    for o in outcomes {
        match &o.result {
            Ok(res) => {
                let dir = cell_dir(out, &o.id);
                fs::create_dir_all(&dir)?;
                let meta = toml::to_string(&cell_meta(&o.id, res, cfg))
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
                fs::write(dir.join(CELL_META_FILE), meta)?;
                fs::write(dir.join(GROUPS_FILE), groups_csv(res))?;
                fs::write(dir.join(SAMPLES_FILE), samples_csv(res, cfg))?;
            }
            Err(e) => {
                errored += 1;
                let msg = e.message.replace(['"', '\n'], "'");
                let _ = writeln!(
                    errors,
                    "{},{},{},{},{},{},\"{msg}\"",
                    o.id.recording,
                    o.id.subject,
                    o.id.resolution,
                    o.id.detector,
                    o.id.gazer,
                    e.kind
                );
            }
        }
    }
    fs::write(out.join(ERRORS_FILE), errors)?;
    Ok(MatrixSummary {
        cells: outcomes.len(),
        errored,
    })
}

/// Ingest, run and write all cells. Fails with `AllCellsFailed` when nothing succeeded.
pub fn run_matrix(cfg: &RunConfig) -> Result<MatrixSummary, MatrixError> {
    cfg.validate()?;
    let recs = ingest_all(&cfg.recordings)?;
    let outcomes = run_all(&recs, cfg);
    fs::create_dir_all(&cfg.output_dir)?;
    let summary = write_outcomes(&cfg.output_dir, &outcomes, cfg)?;
    if summary.cells > 0 && summary.errored == summary.cells {
        return Err(MatrixError::AllCellsFailed(summary.cells));
    }
    Ok(summary)
}
