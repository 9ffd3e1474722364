//! One matrix cell: detect → temporal filter → calibrate → map → metrics.

use gazebench_core::detect::{
    accept_direct_ellipse, detect_from_mask, detect_native, temporal_iou_filter, DetectError, DetectorParams,
    Feature, PupilObservation, SegMask,
};
use gazebench_core::gaze_feature::{fit_polynomial, map_gaze, CalibPair, FeatureGazeError, PolyMapper};
use gazebench_core::gaze_model3d::{
    align_world_rotation, fit_eyeball, gaze_ray, map_gaze_3d, EyeModel3D, Model3dError, WorldAlignment,
};
use gazebench_core::geom::{dir_to_azel, SphericalDirection};
use gazebench_core::metrics::{group_metrics, FixationGroup, GazeSample, GroupMetrics, MetricsError};
use gazebench_core::recording::{ProtocolEvent, Recording, RecordingError};
use nalgebra::{Point2, Vector3};
use thiserror::Error;

use crate::config::{DetectorKind, GazerKind, RunConfig};

#[derive(Error, Debug)]
pub enum CellError {
    #[error("recording has no {0} for this detector")]
    MissingSource(&'static str),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Recording(#[from] RecordingError),
    #[error(transparent)]
    Feature(#[from] FeatureGazeError),
    #[error(transparent)]
    Model(#[from] Model3dError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CellError {
    /// Stable error-kind label for errors.csv.
    pub fn kind(&self) -> &'static str {
        match self {
            CellError::MissingSource(_) => "MissingSource",
            CellError::Detect(DetectError::InvalidFrame(_)) => "InvalidFrame",
            CellError::Detect(DetectError::InvalidMask(_)) => "InvalidMask",
            CellError::Detect(_) => "DetectError",
            CellError::Recording(_) => "RecordingError",
            CellError::Feature(FeatureGazeError::DegenerateCalibration { .. }) => "DegenerateCalibration",
            CellError::Feature(FeatureGazeError::TargetBehindCamera(_)) => "TargetBehindCamera",
            CellError::Model(Model3dError::InsufficientCalibration { .. }) => "InsufficientCalibration",
            CellError::Model(Model3dError::NonConvergentFit(_)) => "NonConvergentFit",
            CellError::Model(Model3dError::ModelNotFitted) => "ModelNotFitted",
            CellError::Model(Model3dError::DegenerateAlignment(_)) => "DegenerateAlignment",
            CellError::Metrics(_) => "EmptyGroup",
        }
    }
}

/// Per-frame observations for one detector, with calibration eligibility set.
pub fn detect_stream(
    rec: &Recording,
    detector: DetectorKind,
    params: &DetectorParams,
) -> Result<Vec<PupilObservation>, CellError> {
    let mut obs = match detector {
        DetectorKind::DirectPupil | DetectorKind::DirectIris => {
            let feature = if detector == DetectorKind::DirectPupil {
                Feature::Pupil
            } else {
                Feature::Iris
            };
            let recs = rec.ellipses.as_ref().ok_or(CellError::MissingSource("ellipse stream"))?;
            recs.iter()
                .map(|r| accept_direct_ellipse(r, feature).unwrap_or_else(|_| PupilObservation::absent(r.timestamp)))
                .collect::<Vec<_>>()
        }
        DetectorKind::Mask => {
            let seq = rec.masks.as_ref().ok_or(CellError::MissingSource("masks"))?;
            let mut out = Vec::with_capacity(seq.len());
            for (i, &t) in seq.timestamps.iter().enumerate() {
                let mask = SegMask::from_image(&seq.load(i)?)?;
                out.push(detect_from_mask(&mask, t, params)?);
            }
            out
        }
        DetectorKind::Native => {
            let seq = rec.frames.as_ref().ok_or(CellError::MissingSource("frames"))?;
            let mut out = Vec::with_capacity(seq.len());
            for (i, &t) in seq.timestamps.iter().enumerate() {
                out.push(detect_native(&seq.load(i)?, t, params)?);
            }
            out
        }
    };
    temporal_iou_filter(&mut obs, params);
    Ok(obs)
}

/// Observations whose timestamps fall inside the event window.
pub fn window_slice<'a>(obs: &'a [PupilObservation], ev: &ProtocolEvent) -> &'a [PupilObservation] {
    let start = obs.partition_point(|o| o.timestamp < ev.window[0] - 1e-9);
    let end = start + obs[start..].iter().take_while(|o| ev.contains(o.timestamp)).count();
    &obs[start..end]
}

fn eligible(window: &[PupilObservation]) -> impl Iterator<Item = &PupilObservation> {
    window.iter().filter(|o| o.calibration_eligible && o.pupil.is_some())
}

pub fn target_direction(ev: &ProtocolEvent) -> Option<(Vector3<f64>, SphericalDirection)> {
    let v = Vector3::from(ev.target_pos).try_normalize(1e-12)?;
    Some((v, dir_to_azel(&v).ok()?))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedGazer {
    Feature(PolyMapper),
    Model3d {
        model: EyeModel3D,
        alignment: WorldAlignment,
    },
}

impl FittedGazer {
    pub fn map(&self, rec: &Recording, obs: &PupilObservation) -> Option<SphericalDirection> {
        match self {
            FittedGazer::Feature(m) => map_gaze(m, obs),
            FittedGazer::Model3d { model, alignment } => {
                map_gaze_3d(model, alignment, &rec.meta.eye_camera, obs).ok().flatten()
            }
        }
    }
}

/// Fit-quality numbers written next to each cell's results.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDiagnostics {
    pub calibration_pairs: usize,
    /// Pixels for the feature gazer, meters for the eyeball fit.
    pub fit_rms: f64,
    pub eyeball_center: Option<[f64; 3]>,
    pub observations_used: usize,
    pub iterations: usize,
    pub selection_flips: usize,
    pub converged: bool,
    pub alignment_residual_deg: Option<f64>,
}

pub fn fit_feature(
    rec: &Recording,
    obs: &[PupilObservation],
    raw_samples: bool,
) -> Result<(FittedGazer, CellDiagnostics), CellError> {
    let world = &rec.meta.world_camera;
    let mut pairs = Vec::new();
    for ev in &rec.meta.calibration {
        let centers: Vec<Point2<f64>> = eligible(window_slice(obs, ev))
            .filter_map(|o| o.pupil.map(|p| p.center))
            .collect();
        if centers.is_empty() {
            continue;
        }
        let target = Vector3::from(ev.target_pos);
        if raw_samples {
            for c in centers {
                pairs.push(CalibPair::new(c, target, world)?);
            }
        } else {
            let n = centers.len() as f64;
            let mean = Point2::new(
                centers.iter().map(|c| c.x).sum::<f64>() / n,
                centers.iter().map(|c| c.y).sum::<f64>() / n,
            );
            pairs.push(CalibPair::new(mean, target, world)?);
        }
    }
    let mapper = fit_polynomial(&pairs, world)?;
    let diag = CellDiagnostics {
        calibration_pairs: pairs.len(),
        fit_rms: mapper.fit_residual_rms,
        eyeball_center: None,
        observations_used: pairs.len(),
        iterations: 0,
        selection_flips: 0,
        converged: true,
        alignment_residual_deg: None,
    };
    Ok((FittedGazer::Feature(mapper), diag))
}

pub fn fit_model3d(
    rec: &Recording,
    obs: &[PupilObservation],
    cfg: &RunConfig,
) -> Result<(FittedGazer, CellDiagnostics), CellError> {
    let cam = &rec.meta.eye_camera;
    let calib: Vec<PupilObservation> = rec
        .meta
        .calibration
        .iter()
        .flat_map(|ev| eligible(window_slice(obs, ev)).copied())
        .collect();
    let model = match fit_eyeball(&calib, cam, &cfg.model_fit, &cfg.eye_priors) {
        Ok(m) => m,
        // The best iterate is still usable; the diagnostics flag it.
        Err(Model3dError::NonConvergentFit(m)) => *m,
        Err(e) => return Err(e.into()),
    };

    let mut eye_dirs = Vec::new();
    let mut target_dirs = Vec::new();
    for ev in &rec.meta.calibration {
        let Some((target, _)) = target_direction(ev) else {
            continue;
        };
        let mut sum = Vector3::zeros();
        for o in eligible(window_slice(obs, ev)) {
            if let Some(r) = gaze_ray(&model, cam, o)? {
                sum += r.ray.direction;
            }
        }
        if let Some(mean) = sum.try_normalize(1e-12) {
            eye_dirs.push(mean);
            target_dirs.push(target);
        }
    }
    let alignment = align_world_rotation(&eye_dirs, &target_dirs)?;
    let d = model.diagnostics;
    let diag = CellDiagnostics {
        calibration_pairs: eye_dirs.len(),
        fit_rms: model.fit_rms,
        eyeball_center: Some([model.center.x, model.center.y, model.center.z]),
        observations_used: d.observations_used,
        iterations: d.iterations,
        selection_flips: d.selection_flips,
        converged: d.converged,
        alignment_residual_deg: Some(alignment.residual_deg),
    };
    Ok((FittedGazer::Model3d { model, alignment }, diag))
}

/// One assessment window's samples and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub target_id: usize,
    pub repeat: usize,
    pub group: FixationGroup,
    pub metrics: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub groups: Vec<GroupResult>,
    pub diagnostics: CellDiagnostics,
}

pub fn evaluate(
    rec: &Recording,
    obs: &[PupilObservation],
    gazer: &FittedGazer,
    cfg: &RunConfig,
) -> Result<Vec<GroupResult>, CellError> {
    let mut out = Vec::with_capacity(rec.meta.assessment.len());
    for ev in &rec.meta.assessment {
        let Some((_, truth)) = target_direction(ev) else {
            continue;
        };
        let samples: Vec<GazeSample> = window_slice(obs, ev)
            .iter()
            .map(|o| GazeSample {
                timestamp: o.timestamp,
                direction: gazer.map(rec, o),
            })
            .collect();
        let group = FixationGroup::new(samples, truth);
        let metrics = group_metrics(&group, cfg.dropout_threshold, cfg.angular_metric)?;
        out.push(GroupResult {
            target_id: ev.target_id,
            repeat: ev.repeat,
            group,
            metrics,
        });
    }
    Ok(out)
}

/// Runs a gazer over an already-detected stream.
pub fn run_gazer(
    rec: &Recording,
    obs: &[PupilObservation],
    gazer: GazerKind,
    cfg: &RunConfig,
) -> Result<CellResult, CellError> {
    let (fitted, diagnostics) = match gazer {
        GazerKind::Feature => fit_feature(rec, obs, cfg.feature_raw_samples)?,
        GazerKind::Model3d => fit_model3d(rec, obs, cfg)?,
    };
    Ok(CellResult {
        groups: evaluate(rec, obs, &fitted, cfg)?,
        diagnostics,
    })
}

pub fn run_cell(
    rec: &Recording,
    detector: DetectorKind,
    gazer: GazerKind,
    cfg: &RunConfig,
) -> Result<CellResult, CellError> {
    let params = cfg.params_for(&rec.meta.resolution);
    let obs = detect_stream(rec, detector, &params)?;
    run_gazer(rec, &obs, gazer, cfg)
}
