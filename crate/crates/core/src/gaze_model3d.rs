//! 3D model-based gaze estimation.
//!
//! An eyeball is fit once to the calibration-window pupil ellipses and then
//! frozen. Each unprojected pupil circle defines a line through its center
//! along its normal; the eyeball center is the least-squares nearest point to
//! those lines. Gaze is the ray from the eyeball center through the point
//! where the camera ray to the pupil centroid meets the eyeball, rotated into
//! the head frame by a Procrustes alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::PupilObservation;
use crate::geom::{
    angle_between_deg, dir_to_azel, pixel_to_ray, unproject_ellipse, CameraIntrinsics, Circle3D,
    Ray3D, SphericalDirection,
};

pub const MIN_FIT_OBSERVATIONS: usize = 10;
pub const MAX_FIT_ITERATIONS: usize = 20;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Model3dError {
    #[error("insufficient calibration data: {usable} usable observations, need {required}")]
    InsufficientCalibration { usable: usize, required: usize },
    #[error("eyeball fit did not converge after {} iterations", .0.diagnostics.iterations)]
    NonConvergentFit(Box<EyeModel3D>),
    #[error("eye model has not been fitted")]
    ModelNotFitted,
    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFitFilter {
    /// Observations rounder than this are ambiguous about depth and skipped.
    pub max_aspect_ratio: f64,
    pub min_confidence: f64,
}

impl Default for ModelFitFilter {
    fn default() -> Self {
        Self {
            max_aspect_ratio: 0.8,
            min_confidence: 0.6,
        }
    }
}

impl ModelFitFilter {
    pub fn accepts(&self, obs: &PupilObservation) -> bool {
        match obs.pupil {
            Some(e) => obs.confidence >= self.min_confidence && e.aspect_ratio() <= self.max_aspect_ratio,
            None => false,
        }
    }
}

/// Anatomical priors; both overridable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EyePriors {
    pub eyeball_radius: f64,
    pub pupil_radius: f64,
}

impl Default for EyePriors {
    fn default() -> Self {
        Self {
            eyeball_radius: 0.012,
            pupil_radius: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitDiagnostics {
    pub observations_used: usize,
    pub iterations: usize,
    /// Candidate re-selections summed over all iterations.
    pub selection_flips: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeModel3D {
    pub center: Vector3<f64>,
    pub eyeball_radius: f64,
    pub pupil_radius_prior: f64,
    pub frozen: bool,
    pub fit_rms: f64,
    pub diagnostics: FitDiagnostics,
}

impl EyeModel3D {
    /// Unfitted model, mostly useful for tests and manual setups.
    pub fn unfrozen(center: Vector3<f64>, priors: EyePriors) -> Self {
        Self {
            center,
            eyeball_radius: priors.eyeball_radius,
            pupil_radius_prior: priors.pupil_radius,
            frozen: false,
            fit_rms: 0.0,
            diagnostics: FitDiagnostics::default(),
        }
    }

    /// A model frozen at a known center, skipping the fit.
    pub fn frozen_at(center: Vector3<f64>, priors: EyePriors) -> Self {
        Self {
            frozen: true,
            ..Self::unfrozen(center, priors)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GazeLine {
    point: Vector3<f64>,
    dir: Vector3<f64>,
}

impl GazeLine {
    fn from_circle(c: &Circle3D) -> Self {
        Self {
            point: c.center,
            dir: c.normal,
        }
    }

    fn distance_sq(&self, x: &Vector3<f64>) -> f64 {
        let v = x - self.point;
        (v - self.dir * self.dir.dot(&v)).norm_squared()
    }
}

/// Nearest point to a set of lines; `None` when the normal matrix is singular.
fn nearest_point<'a>(lines: impl Iterator<Item = &'a GazeLine>) -> Option<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for l in lines {
        let proj = Matrix3::identity() - l.dir * l.dir.transpose();
        a += proj;
        b += proj * l.point;
    }
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || eig.eigenvalues.min() <= max * 1e-12 {
        return None;
    }
    a.try_inverse().map(|inv| inv * b)
}

/// Index (0/1) of the candidate whose normal points away from `center`.
fn select(cands: &(GazeLine, GazeLine), center: &Vector3<f64>) -> usize {
    let score = |l: &GazeLine| {
        let v = l.point - center;
        let n = v.norm();
        if n > 0.0 {
            l.dir.dot(&(v / n))
        } else {
            0.0
        }
    };
    if score(&cands.1) > score(&cands.0) {
        1
    } else {
        0
    }
}

/// Fits and freezes an eyeball model over a calibration window.
pub fn fit_eyeball(
    observations: &[PupilObservation],
    cam: &CameraIntrinsics,
    filter: &ModelFitFilter,
    priors: &EyePriors,
) -> Result<EyeModel3D, Model3dError> {
    let candidates: Vec<(GazeLine, GazeLine)> = observations
        .iter()
        .filter(|o| filter.accepts(o))
        .filter_map(|o| unproject_ellipse(cam, &o.pupil?, priors.pupil_radius).ok())
        .map(|(a, b)| (GazeLine::from_circle(&a), GazeLine::from_circle(&b)))
        .collect();
    let insufficient = Model3dError::InsufficientCalibration {
        usable: candidates.len(),
        required: MIN_FIT_OBSERVATIONS,
    };
    if candidates.len() < MIN_FIT_OBSERVATIONS {
        return Err(insufficient);
    }

    // Cold start: all 2N candidate lines, unweighted.
    let mut center = nearest_point(candidates.iter().flat_map(|(a, b)| [a, b]))
        .ok_or_else(|| insufficient.clone())?;
    let mut selection: Vec<usize> = vec![usize::MAX; candidates.len()];
    let mut diagnostics = FitDiagnostics {
        observations_used: candidates.len(),
        ..Default::default()
    };
    for iter in 1..=MAX_FIT_ITERATIONS {
        let next: Vec<usize> = candidates.iter().map(|c| select(c, &center)).collect();
        let flips = next.iter().zip(&selection).filter(|(a, b)| a != b).count();
        diagnostics.iterations = iter;
        if flips == 0 {
            diagnostics.converged = true;
            break;
        }
        if iter > 1 {
            diagnostics.selection_flips += flips;
        }
        selection = next;
        let chosen = candidates
            .iter()
            .zip(&selection)
            .map(|(c, &s)| if s == 0 { &c.0 } else { &c.1 });
        center = nearest_point(chosen).ok_or_else(|| insufficient.clone())?;
    }

    let sq: f64 = candidates
        .iter()
        .zip(&selection)
        .map(|(c, &s)| if s == 0 { &c.0 } else { &c.1 })
        .map(|l| l.distance_sq(&center))
        .sum();
    let model = EyeModel3D {
        center,
        eyeball_radius: priors.eyeball_radius,
        pupil_radius_prior: priors.pupil_radius,
        frozen: true,
        fit_rms: (sq / candidates.len() as f64).sqrt(),
        diagnostics,
    };
    if center.z <= 0.0 {
        return Err(insufficient);
    }
    if !diagnostics.converged {
        return Err(Model3dError::NonConvergentFit(Box::new(model)));
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeRay {
    pub ray: Ray3D,
    /// The camera ray missed the eyeball; the closest silhouette point was used.
    pub on_silhouette: bool,
}

/// Eye-camera-space gaze ray; `Ok(None)` is a dropout.
pub fn gaze_ray(
    model: &EyeModel3D,
    cam: &CameraIntrinsics,
    obs: &PupilObservation,
) -> Result<Option<GazeRay>, Model3dError> {
    if !model.frozen {
        return Err(Model3dError::ModelNotFitted);
    }
    let Some(pupil) = obs.pupil else {
        return Ok(None);
    };
    let d = pixel_to_ray(cam, &pupil.center).direction;
    let c = model.center;
    let r = model.eyeball_radius;
    let dc = d.dot(&c);
    let disc = dc * dc - c.norm_squared() + r * r;
    let (surface, on_silhouette) = if disc >= 0.0 {
        (d * (dc - disc.sqrt()), false)
    } else {
        let closest = d * dc;
        (c + (closest - c).normalize() * r, true)
    };
    Ok(Some(GazeRay {
        ray: Ray3D {
            origin: c,
            direction: (surface - c).normalize(),
        },
        on_silhouette,
    }))
}

/// Rotation taking eye-camera gaze directions to head-frame directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldAlignment {
    pub rotation: Matrix3<f64>,
    /// Mean angular error of the aligned calibration pairs, degrees.
    pub residual_deg: f64,
}

impl WorldAlignment {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            residual_deg: 0.0,
        }
    }
}

/// Orthogonal Procrustes (Kabsch) fit minimizing Σ‖R·eᵢ − tᵢ‖².
pub fn align_world_rotation(
    eye_dirs: &[Vector3<f64>],
    target_dirs: &[Vector3<f64>],
) -> Result<WorldAlignment, Model3dError> {
    if eye_dirs.len() != target_dirs.len() {
        return Err(Model3dError::DegenerateAlignment(format!(
            "{} eye directions vs {} targets",
            eye_dirs.len(),
            target_dirs.len()
        )));
    }
    if eye_dirs.len() < 3 {
        return Err(Model3dError::DegenerateAlignment(format!(
            "{} pairs, need at least 3",
            eye_dirs.len()
        )));
    }
    let mut h = Matrix3::zeros();
    for (e, t) in eye_dirs.iter().zip(target_dirs) {
        h += t.normalize() * e.normalize().transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let rank = sv.iter().filter(|&&s| s > sv.max() * 1e-9).count();
    if rank < 2 {
        return Err(Model3dError::DegenerateAlignment(format!(
            "cross-covariance rank {rank}"
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let d = (u * v_t).determinant().signum();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let residual_deg = eye_dirs
        .iter()
        .zip(target_dirs)
        .map(|(e, t)| angle_between_deg(&(rotation * e), t))
        .sum::<f64>()
        / eye_dirs.len() as f64;
    Ok(WorldAlignment {
        rotation,
        residual_deg,
    })
}

/// Head-centered gaze direction for one observation; `Ok(None)` is a dropout.
pub fn map_gaze_3d(
    model: &EyeModel3D,
    alignment: &WorldAlignment,
    cam: &CameraIntrinsics,
    obs: &PupilObservation,
) -> Result<Option<SphericalDirection>, Model3dError> {
    Ok(gaze_ray(model, cam, obs)?.map(|g| {
        dir_to_azel(&(alignment.rotation * g.ray.direction)).expect("unit gaze direction")
    }))
}
