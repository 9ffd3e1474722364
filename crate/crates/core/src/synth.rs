//! Synthetic eye rig: protocols, perfect-fixation kinematics, projected
//! pupil/iris ellipses with seeded parameter noise, and optional rasterized
//! masks and frames.
//!
//! The eye sits at the head origin. The eye camera looks at the eyeball from
//! `cam_offaxis_deg` below the straight-ahead gaze direction.

use image::GrayImage;
use nalgebra::{Matrix3, Point2, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{EllipseRecord, LABEL_BACKGROUND, LABEL_IRIS, LABEL_PUPIL, LABEL_SCLERA};
use crate::geom::{azel_to_dir, dir_to_azel, project_circle, CameraIntrinsics, Circle3D, Ellipse};
use crate::recording::{
    EventKind, GroundTruthRecord, ImageSequence, ImageSource, ProtocolEvent, Recording, SessionMeta, TruthMeta,
    SCHEMA_VERSION,
};

pub const CALIBRATION_DEPTHS: [f64; 3] = [0.4, 0.65, 2.0];
pub const CALIBRATION_SAMPLES: usize = 30;
pub const CALIBRATION_ONSET_SPACING: f64 = 1.5;
pub const CALIBRATION_DELAY: f64 = 0.3;
pub const ASSESSMENT_DIAMETERS: [f64; 3] = [20.0, 30.0, 40.0];
pub const ASSESSMENT_DEPTH: f64 = 1.0;
pub const ASSESSMENT_REPEATS: usize = 3;
pub const ASSESSMENT_WINDOW: f64 = 1.0;
/// Assessment presentations start this long after the calibration ends,
/// and each occupies a slot of this length with the window centered in it.
const ASSESSMENT_GAP: f64 = 1.0;
const ASSESSMENT_SLOT: f64 = 1.5;

/// Rendered intensities for background, sclera, iris and pupil.
pub const FRAME_INTENSITIES: [u8; 4] = [150, 215, 105, 20];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid rig configuration: {0}")]
    InvalidConfig(String),
    #[error("{event}: target {target:?} is not viewable by the eye camera ({reason})")]
    TargetUnviewable {
        event: String,
        target: [f64; 3],
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub subject_id: String,
    /// Eye-camera frame, meters.
    pub eyeball_center: [f64; 3],
    pub eyeball_radius: f64,
    pub pupil_radius: f64,
    pub iris_radius: f64,
    pub eye_cam: CameraIntrinsics,
    pub world_cam: CameraIntrinsics,
    pub cam_offaxis_deg: f64,
    pub noise_sigma_px: f64,
    pub dropout_prob: f64,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub pentagon_radius_deg: f64,
    pub render_masks: bool,
    pub render_frames: bool,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            subject_id: "synth".into(),
            eyeball_center: [0.0, 0.0, 0.1],
            eyeball_radius: 0.012,
            pupil_radius: 0.002,
            iris_radius: 0.006,
            eye_cam: CameraIntrinsics {
                width: 192,
                height: 192,
                focal_length: 600.0,
                principal_point: (96.0, 96.0),
            },
            world_cam: CameraIntrinsics::with_horizontal_fov(640, 480, 100.0).expect("valid default world camera"),
            cam_offaxis_deg: 35.0,
            noise_sigma_px: 0.0,
            dropout_prob: 0.0,
            seed: 0,
            sample_rate_hz: 200.0,
            pentagon_radius_deg: 15.0,
            render_masks: false,
            render_frames: false,
        }
    }
}

impl RigConfig {
    /// Rescales the eye camera to a square `size`×`size` sensor with the same field of view.
    pub fn with_eye_resolution(mut self, size: u32) -> Self {
        let s = size as f64 / self.eye_cam.width as f64;
        self.eye_cam = CameraIntrinsics {
            width: size,
            height: size,
            focal_length: self.eye_cam.focal_length * s,
            principal_point: (self.eye_cam.principal_point.0 * s, self.eye_cam.principal_point.1 * s),
        };
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.pupil_radius > 0.0 && self.pupil_radius < self.iris_radius && self.iris_radius < self.eyeball_radius)
        {
            return bad("radii must satisfy 0 < pupil_radius < iris_radius < eyeball_radius");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        if !(self.noise_sigma_px >= 0.0 && self.noise_sigma_px.is_finite()) {
            return bad("noise_sigma_px must be finite and non-negative");
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad("sample_rate_hz must be positive");
        }
        if 30.0 / self.sample_rate_hz > CALIBRATION_ONSET_SPACING - CALIBRATION_DELAY {
            return bad("sample_rate_hz too low for 30 calibration samples per presentation");
        }
        if !(self.pentagon_radius_deg > 0.0 && self.pentagon_radius_deg < 60.0) {
            return bad("pentagon_radius_deg must lie in (0, 60)");
        }
        if !self.cam_offaxis_deg.is_finite() {
            return bad("cam_offaxis_deg must be finite");
        }
        if self.eyeball_center[2] <= self.eyeball_radius {
            return bad("eyeball must lie in front of the eye camera");
        }
        for cam in [&self.eye_cam, &self.world_cam] {
            cam.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    /// Rotation taking head-frame directions into the eye-camera frame.
    pub fn head_to_eye_cam(&self) -> Matrix3<f64> {
        let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), self.cam_offaxis_deg.to_radians());
        // Head forward maps to the camera's −z (looking back at it), head up to image up.
        tilt.matrix() * Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
    }

    pub fn eyeball_center(&self) -> Vector3<f64> {
        Vector3::from(self.eyeball_center)
    }

    /// Noiseless pupil and iris circles for a head-frame gaze direction.
    pub fn eye_circles(&self, gaze_head: &Vector3<f64>) -> (Circle3D, Circle3D) {
        let axis = (self.head_to_eye_cam() * gaze_head).normalize();
        let e = self.eyeball_center();
        let r = self.eyeball_radius;
        let iris_offset = (r * r - self.iris_radius * self.iris_radius).sqrt();
        let pupil = Circle3D::new(e + axis * r, axis, self.pupil_radius).expect("unit axis");
        let iris = Circle3D::new(e + axis * iris_offset, axis, self.iris_radius).expect("unit axis");
        (pupil, iris)
    }

    fn resolution_tag(&self) -> String {
        format!("{}x{}", self.eye_cam.width, self.eye_cam.height)
    }
}

fn target_at(az_deg: f64, el_deg: f64, depth: f64) -> [f64; 3] {
    let d = azel_to_dir(&crate::geom::SphericalDirection::new(az_deg, el_deg)) * depth;
    [d.x, d.y, d.z]
}

/// Pentagon vertex `k` of radius `radius_deg`, starting straight up.
fn pentagon_vertex(k: usize, radius_deg: f64) -> (f64, f64) {
    let phi = (90.0 + 72.0 * k as f64).to_radians();
    (radius_deg * phi.cos(), radius_deg * phi.sin())
}

/// 18 calibration presentations: per depth, the center then 5 pentagon vertices.
pub fn gen_calibration_protocol(cfg: &RigConfig) -> Vec<ProtocolEvent> {
    let span = CALIBRATION_SAMPLES as f64 / cfg.sample_rate_hz;
    let mut out = Vec::with_capacity(18);
    for &depth in &CALIBRATION_DEPTHS {
        let points = std::iter::once((0.0, 0.0)).chain((0..5).map(|k| pentagon_vertex(k, cfg.pentagon_radius_deg)));
        for (az, el) in points {
            let onset = out.len() as f64 * CALIBRATION_ONSET_SPACING;
            let start = onset + CALIBRATION_DELAY;
            out.push(ProtocolEvent {
                kind: EventKind::Calibration,
                target_id: out.len(),
                repeat: 0,
                target_pos: target_at(az, el, depth),
                window: [start, start + span],
                samples_expected: CALIBRATION_SAMPLES,
            });
        }
    }
    out
}

fn calibration_end() -> f64 {
    18.0 * CALIBRATION_ONSET_SPACING
}

/// The 27 assessment target positions: per ring, the center then 8 ring points.
pub fn assessment_targets() -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(27);
    for &diameter in &ASSESSMENT_DIAMETERS {
        out.push(target_at(0.0, 0.0, ASSESSMENT_DEPTH));
        for k in 0..8 {
            let phi = (45.0 * k as f64).to_radians();
            let e = diameter / 2.0;
            out.push(target_at(e * phi.cos(), e * phi.sin(), ASSESSMENT_DEPTH));
        }
    }
    out
}

/// 27 targets × 3 one-second windows, presented repeat-major.
pub fn gen_assessment_protocol(cfg: &RigConfig) -> Vec<ProtocolEvent> {
    let targets = assessment_targets();
    let samples = (ASSESSMENT_WINDOW * cfg.sample_rate_hz).round() as usize;
    let first = calibration_end() + ASSESSMENT_GAP;
    let mut out = Vec::with_capacity(targets.len() * ASSESSMENT_REPEATS);
    for repeat in 0..ASSESSMENT_REPEATS {
        for (id, &pos) in targets.iter().enumerate() {
            let slot = first + out.len() as f64 * ASSESSMENT_SLOT;
            let start = slot + (ASSESSMENT_SLOT - ASSESSMENT_WINDOW) / 2.0;
            out.push(ProtocolEvent {
                kind: EventKind::Assessment,
                target_id: id,
                repeat,
                target_pos: pos,
                window: [start, start + ASSESSMENT_WINDOW],
                samples_expected: samples,
            });
        }
    }
    out
}

/// A simulated session with its per-sample ground truth attached.
#[derive(Debug, Clone)]
pub struct SimulatedRecording {
    pub recording: Recording,
}

impl SimulatedRecording {
    pub fn ground_truth(&self) -> &[GroundTruthRecord] {
        self.recording.ground_truth.as_deref().unwrap_or(&[])
    }
}

fn check_viewable(
    cfg: &RigConfig,
    label: &str,
    target: [f64; 3],
    pupil: &Circle3D,
    iris: &Circle3D,
) -> Result<(Ellipse, Ellipse), SynthError> {
    let fail = |reason: &str| SynthError::TargetUnviewable {
        event: label.to_string(),
        target,
        reason: reason.to_string(),
    };
    if pupil.normal.dot(&pupil.center) >= 0.0 {
        return Err(fail("pupil faces away from the camera"));
    }
    let pe = project_circle(&cfg.eye_cam, pupil).map_err(|e| fail(&e.to_string()))?;
    let ie = project_circle(&cfg.eye_cam, iris).map_err(|e| fail(&e.to_string()))?;
    let (w, h) = (cfg.eye_cam.width as f64, cfg.eye_cam.height as f64);
    let margin = pe.semi_major;
    if pe.center.x < margin || pe.center.y < margin || pe.center.x > w - margin || pe.center.y > h - margin {
        return Err(fail("pupil leaves the eye-camera field of view"));
    }
    Ok((pe, ie))
}

fn perturb(e: &Ellipse, sigma: f64, rng: &mut ChaCha8Rng) -> Ellipse {
    let dx: f64 = rng.sample(StandardNormal);
    let dy: f64 = rng.sample(StandardNormal);
    let da: f64 = rng.sample(StandardNormal);
    let db: f64 = rng.sample(StandardNormal);
    if sigma == 0.0 {
        return *e;
    }
    let axis = |v: f64, n: f64| (v + 0.5 * sigma * n).max(0.1 * v);
    Ellipse::new(
        Point2::new(e.center.x + sigma * dx, e.center.y + sigma * dy),
        axis(e.semi_major, da),
        axis(e.semi_minor, db),
        e.angle,
    )
    .expect("perturbed axes stay positive")
}

/// Rasterizes the label mask for a gaze state. Pixel centers sit at integer coordinates.
pub fn render_mask(cfg: &RigConfig, pupil: &Ellipse, iris: &Ellipse) -> GrayImage {
    let cam = &cfg.eye_cam;
    let c = cfg.eyeball_center();
    let r2 = cfg.eyeball_radius * cfg.eyeball_radius;
    GrayImage::from_fn(cam.width, cam.height, |x, y| {
        let p = Point2::new(x as f64, y as f64);
        let label = if pupil.contains(&p) {
            LABEL_PUPIL
        } else if iris.contains(&p) {
            LABEL_IRIS
        } else {
            let d = crate::geom::pixel_to_ray(cam, &p).direction;
            let dc = d.dot(&c);
            if dc * dc - c.norm_squared() + r2 >= 0.0 {
                LABEL_SCLERA
            } else {
                LABEL_BACKGROUND
            }
        };
        image::Luma([label])
    })
}

/// Maps a label mask to grayscale intensities.
pub fn render_frame(mask: &GrayImage) -> GrayImage {
    GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        image::Luma([FRAME_INTENSITIES[mask.get_pixel(x, y)[0] as usize]])
    })
}

/// Simulates one session over the given protocol.
///
/// Samples are emitted at `sample_rate_hz` inside protocol windows only. Each
/// sample draws, in order, one uniform for dropout and four normals each for
/// the pupil and iris perturbations, so the stream layout is independent of
/// the noise level.
pub fn simulate_recording(
    cfg: &RigConfig,
    calibration: &[ProtocolEvent],
    assessment: &[ProtocolEvent],
) -> Result<SimulatedRecording, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ellipses = Vec::new();
    let mut truth = Vec::new();
    let mut masks = Vec::new();
    let mut frames = Vec::new();
    let mut events: Vec<(String, &ProtocolEvent)> = calibration
        .iter()
        .enumerate()
        .map(|(i, e)| (e.label(i), e))
        .chain(assessment.iter().enumerate().map(|(i, e)| (e.label(i), e)))
        .collect();
    events.sort_by(|a, b| a.1.window[0].total_cmp(&b.1.window[0]));

    for (label, ev) in &events {
        let target = Vector3::from(ev.target_pos);
        let gaze = target
            .try_normalize(1e-12)
            .ok_or_else(|| SynthError::TargetUnviewable {
                event: label.clone(),
                target: ev.target_pos,
                reason: "target at the eye center".into(),
            })?;
        let true_dir = dir_to_azel(&gaze).expect("unit direction");
        let (pupil_c, iris_c) = cfg.eye_circles(&gaze);
        let (pupil_e, iris_e) = check_viewable(cfg, label, ev.target_pos, &pupil_c, &iris_c)?;
        let rendered = (cfg.render_masks || cfg.render_frames).then(|| render_mask(cfg, &pupil_e, &iris_e));

        let n = ev.samples_expected.max(1);
        for k in 0..n {
            let t = ev.window[0] + k as f64 / cfg.sample_rate_hz;
            if !ev.contains(t) {
                break;
            }
            let frame_index = truth.len() as u64;
            let dropped = rng.random::<f64>() < cfg.dropout_prob;
            let p = perturb(&pupil_e, cfg.noise_sigma_px, &mut rng);
            let i = perturb(&iris_e, cfg.noise_sigma_px, &mut rng);
            ellipses.push(EllipseRecord {
                frame_index,
                timestamp: t,
                pupil: (!dropped).then_some(p),
                iris: (!dropped).then_some(i),
                confidence: (!dropped).then_some(1.0),
            });
            truth.push(GroundTruthRecord {
                frame_index,
                timestamp: t,
                azimuth: true_dir.azimuth,
                elevation: true_dir.elevation,
                dropped,
                pupil: pupil_e,
                iris: iris_e,
            });
            if let Some(mask) = &rendered {
                // A dropped sample renders as an empty frame so no detector can find it.
                let m = if dropped {
                    GrayImage::from_pixel(mask.width(), mask.height(), image::Luma([LABEL_BACKGROUND]))
                } else {
                    mask.clone()
                };
                if cfg.render_frames {
                    frames.push(render_frame(&m));
                }
                if cfg.render_masks {
                    masks.push(m);
                }
            }
        }
    }

    let timestamps: Vec<f64> = truth.iter().map(|r| r.timestamp).collect();
    let seq = |images: Vec<GrayImage>| ImageSequence {
        timestamps: timestamps.clone(),
        images: ImageSource::InMemory(images),
    };
    let meta = SessionMeta {
        schema_version: SCHEMA_VERSION,
        subject_id: cfg.subject_id.clone(),
        resolution: cfg.resolution_tag(),
        sample_rate_hz: cfg.sample_rate_hz,
        eye_camera: cfg.eye_cam,
        world_camera: cfg.world_cam,
        calibration: calibration.to_vec(),
        assessment: assessment.to_vec(),
        truth: Some(TruthMeta {
            eyeball_center: cfg.eyeball_center,
            eyeball_radius: cfg.eyeball_radius,
            pupil_radius: cfg.pupil_radius,
        }),
    };
    Ok(SimulatedRecording {
        recording: Recording {
            name: cfg.subject_id.clone(),
            meta,
            ellipses: Some(ellipses),
            frames: cfg.render_frames.then(|| seq(frames)),
            masks: cfg.render_masks.then(|| seq(masks)),
            ground_truth: Some(truth),
        },
    })
}

/// Default protocols for `cfg`, simulated.
pub fn simulate_default(cfg: &RigConfig) -> Result<SimulatedRecording, SynthError> {
    simulate_recording(cfg, &gen_calibration_protocol(cfg), &gen_assessment_protocol(cfg))
}
