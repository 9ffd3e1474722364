//! Per-frame pupil detection and the two calibration-confidence gates.
//!
//! Three input pathways produce [`PupilObservation`]s:
//! - [`detect_native`]: dark-region thresholding on a raw grayscale frame,
//! - [`detect_from_mask`]: the same pipeline on a segmentation mask,
//! - [`accept_direct_ellipse`]: pass-through of ellipses predicted upstream.
//!
//! [`confidence_score`] and [`temporal_iou_filter`] decide which
//! observations may feed calibration. They never remove observations.

use std::collections::VecDeque;
use std::f64::consts::PI;

use image::GrayImage;
use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{ellipse_iou, Ellipse};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_SCLERA: u8 = 1;
pub const LABEL_IRIS: u8 = 2;
pub const LABEL_PUPIL: u8 = 3;

/// Ellipse-boundary samples used by the edge term of the confidence score.
const EDGE_SAMPLES: usize = 64;
/// Inside/outside offset (pixels) for the edge term.
const EDGE_OFFSET: f64 = 2.0;
/// Boundary points farther than this from a fitted ellipse are outliers.
const INLIER_DISTANCE: f64 = 1.0;
/// Fraction of boundary points a plain fit must explain before RANSAC is skipped.
const MIN_SUPPORT: f64 = 0.95;
const RANSAC_ITERATIONS: usize = 300;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid segmentation mask: {0}")]
    InvalidMask(String),
    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),
    #[error("{feature:?} ellipse missing at t={timestamp}")]
    FeatureMissing { feature: Feature, timestamp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Pupil,
    Iris,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Gray levels above the dark anchor still counted as pupil.
    pub intensity_range: u8,
    /// Minimum equivalent radius of a pupil component, pixels.
    pub pupil_size_min: f64,
    /// Maximum equivalent radius of a pupil component, pixels.
    pub pupil_size_max: f64,
    pub confidence_floor: f64,
    pub iou_threshold: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            intensity_range: 23,
            pupil_size_min: 10.0,
            pupil_size_max: 100.0,
            confidence_floor: 0.6,
            iou_threshold: 0.98,
        }
    }
}

impl DetectorParams {
    /// Defaults tuned per eye-video resolution: the 400×400 stream uses an
    /// intensity range of 10, everything else the stock 23.
    pub fn for_resolution(width: u32, height: u32) -> Self {
        let mut p = Self::default();
        if width >= 400 && height >= 400 {
            p.intensity_range = 10;
        }
        p
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if self.intensity_range == 0 || self.intensity_range == 255 {
            return Err(DetectError::InvalidParams(format!(
                "intensity_range {} outside (0, 255)",
                self.intensity_range
            )));
        }
        if !(self.pupil_size_min > 0.0 && self.pupil_size_min < self.pupil_size_max) {
            return Err(DetectError::InvalidParams(format!(
                "pupil size range [{}, {}] invalid",
                self.pupil_size_min, self.pupil_size_max
            )));
        }
        for (name, v) in [
            ("confidence_floor", self.confidence_floor),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectError::InvalidParams(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-pixel labels in {background/skin, sclera, iris, pupil}.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self, DetectError> {
        if width == 0 || height == 0 {
            return Err(DetectError::InvalidMask("zero dimension".into()));
        }
        if labels.len() != (width as usize) * (height as usize) {
            return Err(DetectError::InvalidMask(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > LABEL_PUPIL) {
            return Err(DetectError::InvalidMask(format!(
                "label {} at index {i} outside {{0,1,2,3}}",
                labels[i]
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn from_image(img: &GrayImage) -> Result<Self, DetectError> {
        Self::new(img.width(), img.height(), img.as_raw().clone())
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.labels.clone())
            .expect("mask buffer matches its dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn label(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PupilObservation {
    pub timestamp: f64,
    /// The tracked feature. For the direct-iris pathway this holds the iris.
    pub pupil: Option<Ellipse>,
    pub iris: Option<Ellipse>,
    pub confidence: f64,
    pub calibration_eligible: bool,
}

impl PupilObservation {
    pub fn absent(timestamp: f64) -> Self {
        Self {
            timestamp,
            pupil: None,
            iris: None,
            confidence: 0.0,
            calibration_eligible: false,
        }
    }
}

/// One line of an ellipse stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseRecord {
    pub frame_index: u64,
    pub timestamp: f64,
    pub pupil: Option<Ellipse>,
    pub iris: Option<Ellipse>,
    pub confidence: Option<f64>,
}

/// A connected dark region.
#[derive(Debug, Clone)]
struct Component {
    pixels: Vec<(u32, u32)>,
}

impl Component {
    fn area(&self) -> f64 {
        self.pixels.len() as f64
    }

    fn equivalent_radius(&self) -> f64 {
        (self.area() / PI).sqrt()
    }
}

/// 8-connected components of the `true` pixels, largest first.
fn connected_components(width: u32, height: u32, on: &[bool]) -> Vec<Component> {
    let w = width as usize;
    let h = height as usize;
    let mut seen = vec![false; on.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x as u32, y as u32));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if on[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        out.push(Component { pixels });
    }
    // Stable sort keeps scan order among equal areas.
    out.sort_by_key(|c| std::cmp::Reverse(c.pixels.len()));
    out
}

/// Crack-edge midpoints between the component and its 4-neighbors outside it.
fn boundary_points(width: u32, height: u32, comp: &Component) -> Vec<Point2<f64>> {
    let w = width as usize;
    let mut member = vec![false; (width as usize) * (height as usize)];
    for &(x, y) in &comp.pixels {
        member[y as usize * w + x as usize] = true;
    }
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < width as i64 && y < height as i64 && member[y as usize * w + x as usize]
    };
    let mut pts = Vec::new();
    for &(x, y) in &comp.pixels {
        let (xi, yi) = (x as i64, y as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            if !inside(xi + dx, yi + dy) {
                pts.push(Point2::new(x as f64 + 0.5 * dx as f64, y as f64 + 0.5 * dy as f64));
            }
        }
    }
    pts
}

/// Ellipse from second-order moments of the component's pixel squares.
fn fit_ellipse_moments(comp: &Component) -> Option<Ellipse> {
    let n = comp.area();
    if n < 1.0 {
        return None;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in &comp.pixels {
        sx += x as f64;
        sy += y as f64;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for &(x, y) in &comp.pixels {
        let dx = x as f64 - mx;
        let dy = y as f64 - my;
        cxx += dx * dx;
        cxy += dx * dy;
        cyy += dy * dy;
    }
    // Each pixel is a unit square: add its own variance of 1/12.
    cxx = cxx / n + 1.0 / 12.0;
    cyy = cyy / n + 1.0 / 12.0;
    cxy /= n;
    let mean = 0.5 * (cxx + cyy);
    let half = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
    let l1 = mean + half;
    let l2 = (mean - half).max(1e-12);
    let angle = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    Ellipse::new(Point2::new(mx, my), 2.0 * l1.sqrt(), 2.0 * l2.sqrt(), angle).ok()
}

/// Direct least-squares ellipse fit (Fitzgibbon constraint, Halir–Flusser
/// partitioning) on normalized coordinates.
pub fn fit_ellipse_direct(points: &[Point2<f64>]) -> Option<Ellipse> {
    if points.len() < 6 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let spread = points
        .iter()
        .map(|p| ((p.x - mx).powi(2) + (p.y - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(spread > 0.0) {
        return None;
    }
    let s = 1.0 / spread;

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let x = (p.x - mx) * s;
        let y = (p.y - my) * s;
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3.try_inverse()?;
    let t = -(s3_inv * s2.transpose());
    let m = s1 + s2 * t;
    // C1⁻¹ · M with C1 = [[0,0,2],[0,-1,0],[2,0,0]].
    let reduced = Matrix3::from_rows(&[
        m.row(2) * 0.5,
        -m.row(1),
        m.row(0) * 0.5,
    ]);

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for ev in reduced.complex_eigenvalues().iter() {
        if ev.im.abs() > 1e-9 * (1.0 + ev.re.abs()) {
            continue;
        }
        let a = reduced - Matrix3::identity() * ev.re;
        let v = null_vector(&a);
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 {
            // Prefer the best-conditioned admissible eigenvector.
            let score = cond / v.norm_squared();
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, v));
            }
        }
    }
    let a1 = best?.1;
    let a2 = t * a1;
    let (a, b, c) = (a1[0], a1[1], a1[2]);
    let (d, e, f) = (a2[0], a2[1], a2[2]);
    let normalized = Matrix3::new(
        a,
        b / 2.0,
        d / 2.0,
        b / 2.0,
        c,
        e / 2.0,
        d / 2.0,
        e / 2.0,
        f,
    );
    let to_norm = Matrix3::new(s, 0.0, -mx * s, 0.0, s, -my * s, 0.0, 0.0, 1.0);
    let conic = to_norm.transpose() * normalized * to_norm;
    Ellipse::from_conic(&conic).ok()
}

/// Unit vector spanning the (numerical) null space of a rank-2 matrix.
fn null_vector(a: &Matrix3<f64>) -> Vector3<f64> {
    let r0 = a.row(0).transpose();
    let r1 = a.row(1).transpose();
    let r2 = a.row(2).transpose();
    let cands = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = cands
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
        .copied()
        .unwrap_or_else(Vector3::zeros);
    let n = best.norm();
    if n > 0.0 {
        best / n
    } else {
        best
    }
}

/// First-order (Sampson) distance from `p` to the boundary of `e`, pixels.
fn boundary_distance(e: &Ellipse, p: &Point2<f64>) -> f64 {
    let (s, c) = e.angle.sin_cos();
    let dx = p.x - e.center.x;
    let dy = p.y - e.center.y;
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let (a2, b2) = (e.semi_major * e.semi_major, e.semi_minor * e.semi_minor);
    let q = u * u / a2 + v * v / b2 - 1.0;
    let grad = 2.0 * ((u / a2).powi(2) + (v / b2).powi(2)).sqrt();
    if grad > 0.0 {
        q.abs() / grad
    } else {
        f64::INFINITY
    }
}

fn inliers(e: &Ellipse, points: &[Point2<f64>]) -> Vec<Point2<f64>> {
    points
        .iter()
        .filter(|p| boundary_distance(e, p) <= INLIER_DISTANCE)
        .copied()
        .collect()
}

/// Seeded RANSAC over boundary points, refit on the consensus set.
fn fit_ellipse_robust(points: &[Point2<f64>]) -> Option<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(points.len() as u64);
    let mut best: Option<(usize, Ellipse)> = None;
    let mut sample = [Point2::origin(); 6];
    for _ in 0..RANSAC_ITERATIONS {
        for slot in sample.iter_mut() {
            *slot = points[rng.random_range(0..points.len())];
        }
        let Some(candidate) = fit_ellipse_direct(&sample) else {
            continue;
        };
        let support = points
            .iter()
            .filter(|p| boundary_distance(&candidate, p) <= INLIER_DISTANCE)
            .count();
        if best.as_ref().is_none_or(|(n, _)| support > *n) {
            best = Some((support, candidate));
        }
    }
    let (_, mut e) = best?;
    for _ in 0..2 {
        let consensus = inliers(&e, points);
        e = fit_ellipse_direct(&consensus)?;
    }
    Some(e)
}

fn fit_component(width: u32, height: u32, comp: &Component) -> Option<Ellipse> {
    let boundary = boundary_points(width, height, comp);
    if boundary.len() < 6 {
        return fit_ellipse_moments(comp);
    }
    match fit_ellipse_direct(&boundary) {
        // Occlusions leave straight cut edges that drag a global fit away.
        Some(e) if (inliers(&e, &boundary).len() as f64) < MIN_SUPPORT * boundary.len() as f64 => {
            let robust = fit_ellipse_robust(&boundary).unwrap_or(e);
            let better = inliers(&robust, &boundary).len() > inliers(&e, &boundary).len();
            Some(if better { robust } else { e })
        }
        Some(e) => Some(e),
        None => fit_ellipse_moments(comp),
    }
}

/// Dark anchor: the intensity below which at least a quarter of the
/// smallest admissible pupil's area lies. Single noisy pixels cannot move it.
fn dark_anchor(frame: &GrayImage, params: &DetectorParams) -> u8 {
    let mut hist = [0usize; 256];
    for &v in frame.as_raw() {
        hist[v as usize] += 1;
    }
    let rank = ((PI * params.pupil_size_min.powi(2) / 4.0).ceil() as usize).max(1);
    let mut acc = 0;
    for (level, &count) in hist.iter().enumerate() {
        acc += count;
        if acc >= rank {
            return level as u8;
        }
    }
    255
}

struct Detection {
    ellipse: Ellipse,
    area: f64,
}

/// Threshold, label, size-filter, and fit the largest surviving component.
fn detect_dark_region(frame: &GrayImage, params: &DetectorParams) -> Option<Detection> {
    let threshold = dark_anchor(frame, params) as u16 + params.intensity_range as u16;
    let dark: Vec<bool> = frame.as_raw().iter().map(|&v| (v as u16) <= threshold).collect();
    if dark.iter().all(|&d| d) {
        // No contrast anywhere in the frame.
        return None;
    }
    let comps = connected_components(frame.width(), frame.height(), &dark);
    let comp = comps.into_iter().find(|c| {
        let r = c.equivalent_radius();
        r >= params.pupil_size_min && r <= params.pupil_size_max
    })?;
    let ellipse = fit_component(frame.width(), frame.height(), &comp)?;
    Some(Detection {
        ellipse,
        area: comp.area(),
    })
}

fn check_frame(frame: &GrayImage) -> Result<(), DetectError> {
    if frame.width() == 0 || frame.height() == 0 {
        return Err(DetectError::InvalidFrame("empty frame".into()));
    }
    Ok(())
}

/// Native dark-pupil detector on an 8-bit grayscale frame.
pub fn detect_native(
    frame: &GrayImage,
    timestamp: f64,
    params: &DetectorParams,
) -> Result<PupilObservation, DetectError> {
    check_frame(frame)?;
    params.validate()?;
    let mut obs = PupilObservation::absent(timestamp);
    if let Some(det) = detect_dark_region(frame, params) {
        obs.confidence = confidence_score(frame, &det.ellipse, det.area, params.intensity_range);
        obs.pupil = Some(det.ellipse);
    }
    Ok(obs)
}

/// Runs the native pipeline on a segmentation mask rendered as a binary
/// image (pupil → 0, everything else → 255). The iris ellipse is fit to the
/// iris ∪ pupil region when iris pixels exist.
pub fn detect_from_mask(
    mask: &SegMask,
    timestamp: f64,
    params: &DetectorParams,
) -> Result<PupilObservation, DetectError> {
    params.validate()?;
    let binary = GrayImage::from_raw(
        mask.width,
        mask.height,
        mask.labels
            .iter()
            .map(|&l| if l == LABEL_PUPIL { 0 } else { 255 })
            .collect(),
    )
    .expect("mask buffer matches its dimensions");

    let mut obs = PupilObservation::absent(timestamp);
    if let Some(det) = detect_dark_region(&binary, params) {
        obs.confidence = confidence_score(&binary, &det.ellipse, det.area, params.intensity_range);
        obs.pupil = Some(det.ellipse);
    }
    if mask.labels.contains(&LABEL_IRIS) {
        let region: Vec<bool> = mask
            .labels
            .iter()
            .map(|&l| l == LABEL_IRIS || l == LABEL_PUPIL)
            .collect();
        let comps = connected_components(mask.width, mask.height, &region);
        if let Some(largest) = comps.first() {
            obs.iris = fit_component(mask.width, mask.height, largest);
        }
    }
    Ok(obs)
}

/// Wraps an upstream-predicted ellipse as the tracked feature.
pub fn accept_direct_ellipse(
    rec: &EllipseRecord,
    which: Feature,
) -> Result<PupilObservation, DetectError> {
    let tracked = match which {
        Feature::Pupil => rec.pupil,
        Feature::Iris => rec.iris,
    }
    .ok_or(DetectError::FeatureMissing {
        feature: which,
        timestamp: rec.timestamp,
    })?;
    Ok(PupilObservation {
        timestamp: rec.timestamp,
        pupil: Some(tracked),
        iris: rec.iris,
        confidence: rec.confidence.unwrap_or(1.0).clamp(0.0, 1.0),
        calibration_eligible: false,
    })
}

fn bilinear(img: &GrayImage, p: Point2<f64>) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0) {
        return None;
    }
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let fx = p.x - x0;
    let fy = p.y - y0;
    let x1 = (x0 + 1.0).min(w - 1.0);
    let y1 = (y0 + 1.0).min(h - 1.0);
    let px = |x: f64, y: f64| img.get_pixel(x as u32, y as u32)[0] as f64;
    let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
    let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Shape/edge confidence in `[0, 1]`.
///
/// The shape term compares the component area with the fitted ellipse area;
/// the edge term is the fraction of boundary samples whose outside-minus-
/// inside intensity step exceeds `intensity_range`. Both weigh 0.5.
pub fn confidence_score(
    source: &GrayImage,
    e: &Ellipse,
    component_area: f64,
    intensity_range: u8,
) -> f64 {
    let ellipse_area = e.area();
    let shape = if component_area > 0.0 && ellipse_area > 0.0 {
        component_area.min(ellipse_area) / component_area.max(ellipse_area)
    } else {
        0.0
    };
    let mut supported = 0usize;
    for i in 0..EDGE_SAMPLES {
        let t = 2.0 * PI * i as f64 / EDGE_SAMPLES as f64;
        let p = e.point_at(t);
        let n = e.normal_at(t);
        let inside = bilinear(source, p - n * EDGE_OFFSET);
        let outside = bilinear(source, p + n * EDGE_OFFSET);
        if let (Some(i), Some(o)) = (inside, outside) {
            if o - i > intensity_range as f64 {
                supported += 1;
            }
        }
    }
    let edge = supported as f64 / EDGE_SAMPLES as f64;
    (0.5 * shape.clamp(0.0, 1.0) + 0.5 * edge.clamp(0.0, 1.0)).clamp(0.0, 1.0)
}

/// Calibration eligibility of `current` given the preceding observation.
pub fn is_eligible(
    previous: Option<&PupilObservation>,
    current: &PupilObservation,
    params: &DetectorParams,
) -> bool {
    let (Some(cur), Some(prev)) = (current.pupil, previous.and_then(|p| p.pupil)) else {
        return false;
    };
    current.confidence >= params.confidence_floor && ellipse_iou(&prev, &cur) >= params.iou_threshold
}

/// Sets `calibration_eligible` on every observation of a time-ordered stream.
/// The comparison is against the previous detected ellipse, eligible or not.
pub fn temporal_iou_filter(stream: &mut [PupilObservation], params: &DetectorParams) {
    let mut prev: Option<PupilObservation> = None;
    for obs in stream.iter_mut() {
        obs.calibration_eligible = is_eligible(prev.as_ref(), obs, params);
        prev = Some(*obs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_frame(size: u32, cx: f64, cy: f64, r: f64, fg: u8, bg: u8) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            image::Luma([if d <= r { fg } else { bg }])
        })
    }

    #[test]
    fn params_defaults_and_validation() {
        let p = DetectorParams::default();
        assert_eq!(p.intensity_range, 23);
        assert_eq!((p.pupil_size_min, p.pupil_size_max), (10.0, 100.0));
        assert_eq!(p.iou_threshold, 0.98);
        assert_eq!(DetectorParams::for_resolution(400, 400).intensity_range, 10);
        assert_eq!(DetectorParams::for_resolution(192, 192).intensity_range, 23);
        let bad = DetectorParams {
            pupil_size_min: 200.0,
            ..p
        };
        assert!(bad.validate().is_err());
        let bad = DetectorParams {
            intensity_range: 0,
            ..p
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn uniform_frame_has_no_pupil() {
        let f = GrayImage::from_pixel(192, 192, image::Luma([255]));
        let obs = detect_native(&f, 0.0, &DetectorParams::default()).unwrap();
        assert!(obs.pupil.is_none());
        assert_eq!(obs.confidence, 0.0);
    }

    #[test]
    fn empty_frame_is_invalid() {
        let f = GrayImage::new(0, 0);
        assert!(matches!(
            detect_native(&f, 0.0, &DetectorParams::default()),
            Err(DetectError::InvalidFrame(_))
        ));
    }

    #[test]
    fn dark_disc_recovered() {
        let f = disc_frame(192, 96.0, 96.0, 20.0, 0, 200);
        let obs = detect_native(&f, 1.0, &DetectorParams::default()).unwrap();
        let e = obs.pupil.unwrap();
        assert!((e.center - Point2::new(96.0, 96.0)).norm() < 0.5);
        assert!((e.semi_major - 20.0).abs() <= 1.0 && (e.semi_minor - 20.0).abs() <= 1.0);
        assert!(obs.confidence >= 0.95, "confidence {}", obs.confidence);
    }

    #[test]
    fn small_disc_rejected() {
        let f = disc_frame(192, 96.0, 96.0, 6.0, 0, 200);
        let obs = detect_native(&f, 0.0, &DetectorParams::default()).unwrap();
        assert!(obs.pupil.is_none());
    }

    #[test]
    fn brightness_shift_invariance() {
        let p = DetectorParams::default();
        let a = detect_native(&disc_frame(192, 90.3, 101.7, 17.0, 10, 180), 0.0, &p).unwrap();
        let b = detect_native(&disc_frame(192, 90.3, 101.7, 17.0, 30, 200), 0.0, &p).unwrap();
        assert_eq!(a.pupil, b.pupil);
        assert_eq!(a.confidence, b.confidence);
    }

    #[test]
    fn all_background_mask_has_no_pupil() {
        let m = SegMask::new(64, 64, vec![0; 64 * 64]).unwrap();
        let obs = detect_from_mask(&m, 0.0, &DetectorParams::default()).unwrap();
        assert!(obs.pupil.is_none() && obs.iris.is_none());
    }

    #[test]
    fn mask_validation() {
        assert!(SegMask::new(2, 2, vec![0, 1, 2, 4]).is_err());
        assert!(SegMask::new(2, 2, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn direct_ellipse_pathways() {
        let e = Ellipse::new(Point2::new(50.0, 60.0), 10.0, 8.0, 0.2).unwrap();
        let rec = EllipseRecord {
            frame_index: 0,
            timestamp: 0.5,
            pupil: Some(e),
            iris: None,
            confidence: Some(0.9),
        };
        let obs = accept_direct_ellipse(&rec, Feature::Pupil).unwrap();
        assert_eq!(obs.pupil, Some(e));
        assert_eq!(obs.confidence, 0.9);
        assert!(matches!(
            accept_direct_ellipse(&rec, Feature::Iris),
            Err(DetectError::FeatureMissing { feature: Feature::Iris, .. })
        ));

        let e2 = Ellipse::new(Point2::new(50.0, 60.0), 30.0, 25.0, 0.2).unwrap();
        let rec = EllipseRecord {
            frame_index: 1,
            timestamp: 0.6,
            pupil: None,
            iris: Some(e2),
            confidence: None,
        };
        let obs = accept_direct_ellipse(&rec, Feature::Iris).unwrap();
        assert_eq!(obs.pupil, Some(e2));
        assert_eq!(obs.confidence, 1.0);
    }

    #[test]
    fn confidence_without_edges_is_at_most_half() {
        let f = GrayImage::from_pixel(100, 100, image::Luma([128]));
        let e = Ellipse::circle(Point2::new(50.0, 50.0), 15.0).unwrap();
        let s = confidence_score(&f, &e, e.area(), 23);
        assert!(s <= 0.5);
    }

    #[test]
    fn confidence_for_half_occluded_disc() {
        // Left half of the disc is covered by a mid-gray occluder: the dark
        // component shrinks to a half disc while the boundary keeps contrast.
        let f = GrayImage::from_fn(192, 192, |x, y| {
            let d = ((x as f64 - 96.0).powi(2) + (y as f64 - 96.0).powi(2)).sqrt();
            let v = if d <= 25.0 {
                if (x as f64) < 96.0 {
                    90
                } else {
                    0
                }
            } else {
                220
            };
            image::Luma([v])
        });
        let e = Ellipse::circle(Point2::new(96.0, 96.0), 25.0).unwrap();
        let half_area = (0..192u32)
            .flat_map(|y| (0..192u32).map(move |x| (x, y)))
            .filter(|&(x, y)| f.get_pixel(x, y)[0] == 0)
            .count() as f64;
        let s = confidence_score(&f, &e, half_area, 23);
        assert!((0.5..=0.9).contains(&s), "score {s}");
    }

    fn obs(t: f64, cx: f64) -> PupilObservation {
        PupilObservation {
            timestamp: t,
            pupil: Some(Ellipse::circle(Point2::new(cx, 96.0), 20.0).unwrap()),
            iris: None,
            confidence: 1.0,
            calibration_eligible: false,
        }
    }

    #[test]
    fn constant_stream_eligible_from_second_frame() {
        let mut s: Vec<_> = (0..10).map(|i| obs(i as f64, 96.0)).collect();
        temporal_iou_filter(&mut s, &DetectorParams::default());
        assert!(!s[0].calibration_eligible);
        assert!(s[1..].iter().all(|o| o.calibration_eligible));
    }

    #[test]
    fn jump_is_rejected_and_drift_accepted() {
        let p = DetectorParams::default();
        let mut s = vec![obs(0.0, 96.0), obs(1.0, 101.0)];
        temporal_iou_filter(&mut s, &p);
        assert!(!s[1].calibration_eligible);
        let mut s: Vec<_> = (0..10).map(|i| obs(i as f64, 96.0 + 0.05 * i as f64)).collect();
        temporal_iou_filter(&mut s, &p);
        assert!(s[1..].iter().all(|o| o.calibration_eligible));
    }

    #[test]
    fn absent_pupil_breaks_eligibility() {
        let p = DetectorParams::default();
        let mut s = vec![obs(0.0, 96.0), PupilObservation::absent(1.0), obs(2.0, 96.0), obs(3.0, 96.0)];
        temporal_iou_filter(&mut s, &p);
        let flags: Vec<_> = s.iter().map(|o| o.calibration_eligible).collect();
        assert_eq!(flags, vec![false, false, false, true]);
    }

    #[test]
    fn low_confidence_is_ineligible() {
        let p = DetectorParams::default();
        let mut s = vec![obs(0.0, 96.0), obs(1.0, 96.0)];
        s[1].confidence = 0.3;
        temporal_iou_filter(&mut s, &p);
        assert!(!s[1].calibration_eligible);
    }
}
