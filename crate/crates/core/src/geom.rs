//! Camera models, ellipse algebra, spherical gaze coordinates and the
//! circle/ellipse projective geometry shared by the rest of the crate.
//!
//! Frame conventions:
//! - Camera frames are right-handed pinhole frames with +x along image
//!   columns, +y along image rows (down) and +z into the scene. All 3D
//!   quantities are in meters.
//! - Head-frame directions use +x right, +y up and +z straight ahead, so
//!   `(0, 0, 1)` is azimuth 0°, elevation 0°.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Point2, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of polygon vertices used for ellipse region arithmetic.
pub const IOU_POLYGON_VERTICES: usize = 64;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid ellipse: {0}")]
    InvalidEllipse(String),
    #[error("direction vector has zero length")]
    InvalidDirection,
    #[error("circle is not entirely in front of the camera")]
    BehindCamera,
    #[error("ellipse is degenerate (aspect ratio {0:e})")]
    DegenerateEllipse(f64),
    #[error("conic does not describe a real ellipse")]
    NotAnEllipse,
}

/// Ideal pinhole camera with square pixels and zero distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub focal_length: f64,
    pub principal_point: (f64, f64),
}

impl CameraIntrinsics {
    pub fn new(
        width: u32,
        height: u32,
        focal_length: f64,
        principal_point: (f64, f64),
    ) -> Result<Self, GeomError> {
        let cam = Self {
            width,
            height,
            focal_length,
            principal_point,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image center and the focal
    /// length chosen so the horizontal field of view equals `hfov_deg`.
    pub fn with_horizontal_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeomError> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "horizontal fov {hfov_deg} outside (0, 180)"
            )));
        }
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(width, height, f, (width as f64 / 2.0, height as f64 / 2.0))
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeomError::InvalidIntrinsics("zero image dimension".into()));
        }
        if !(self.focal_length.is_finite() && self.focal_length > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal length {} must be positive",
                self.focal_length
            )));
        }
        let (cx, cy) = self.principal_point;
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside the sensor"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (cx, cy) = self.principal_point;
        let f = self.focal_length;
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` for points at or behind the
    /// camera plane.
    pub fn project(&self, point: &Vector3<f64>) -> Option<Point2<f64>> {
        if point.z <= 0.0 {
            return None;
        }
        let (cx, cy) = self.principal_point;
        Some(Point2::new(
            cx + self.focal_length * point.x / point.z,
            cy + self.focal_length * point.y / point.z,
        ))
    }

    pub fn contains_pixel(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width as f64 && p.y <= self.height as f64
    }
}

/// Image-space ellipse. `angle` is the direction of the major axis,
/// `(cos angle, sin angle)` in pixel coordinates, normalized to `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: Point2<f64>,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Builds a normalized ellipse. Axes may be given in either order; the
    /// angle refers to the first axis and is adjusted when they are swapped.
    pub fn new(center: Point2<f64>, axis_a: f64, axis_b: f64, angle: f64) -> Result<Self, GeomError> {
        if !(center.x.is_finite() && center.y.is_finite() && angle.is_finite()) {
            return Err(GeomError::InvalidEllipse("non-finite parameter".into()));
        }
        if !(axis_a.is_finite() && axis_b.is_finite() && axis_a > 0.0 && axis_b > 0.0) {
            return Err(GeomError::InvalidEllipse(format!(
                "semi-axes ({axis_a}, {axis_b}) must be positive"
            )));
        }
        let (semi_major, semi_minor, angle) = if axis_a >= axis_b {
            (axis_a, axis_b, angle)
        } else {
            (axis_b, axis_a, angle + PI / 2.0)
        };
        Ok(Self {
            center,
            semi_major,
            semi_minor,
            angle: normalize_half_turn(angle),
        })
    }

    pub fn circle(center: Point2<f64>, radius: f64) -> Result<Self, GeomError> {
        Self::new(center, radius, radius, 0.0)
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.semi_minor / self.semi_major
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_major * self.semi_minor
    }

    /// Boundary point at parameter `t` (radians).
    pub fn point_at(&self, t: f64) -> Point2<f64> {
        let (s, c) = self.angle.sin_cos();
        let (st, ct) = t.sin_cos();
        let x = self.semi_major * ct;
        let y = self.semi_minor * st;
        Point2::new(self.center.x + c * x - s * y, self.center.y + s * x + c * y)
    }

    /// Outward unit normal at parameter `t`.
    pub fn normal_at(&self, t: f64) -> Vector2<f64> {
        let (s, c) = self.angle.sin_cos();
        let (st, ct) = t.sin_cos();
        let nx = ct / self.semi_major;
        let ny = st / self.semi_minor;
        Vector2::new(c * nx - s * ny, s * nx + c * ny).normalize()
    }

    /// Value of the implicit form `q(p) - 1`; negative inside.
    pub fn implicit(&self, p: &Point2<f64>) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) - 1.0
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        self.implicit(p) <= 0.0
    }

    /// Homogeneous symmetric conic matrix `C` with `pᵀ C p = 0` on the
    /// boundary and `pᵀ C p < 0` inside.
    pub fn conic(&self) -> Matrix3<f64> {
        let (s, c) = self.angle.sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let diag = Matrix2::new(
            1.0 / (self.semi_major * self.semi_major),
            0.0,
            0.0,
            1.0 / (self.semi_minor * self.semi_minor),
        );
        let m = rot * diag * rot.transpose();
        let ctr = self.center.coords;
        let lin = -(m * ctr);
        let constant = ctr.dot(&(m * ctr)) - 1.0;
        Matrix3::new(
            m[(0, 0)],
            m[(0, 1)],
            lin.x,
            m[(1, 0)],
            m[(1, 1)],
            lin.y,
            lin.x,
            lin.y,
            constant,
        )
    }

    /// Recovers ellipse parameters from a (possibly scaled, either-sign)
    /// homogeneous conic matrix.
    pub fn from_conic(conic: &Matrix3<f64>) -> Result<Self, GeomError> {
        let sym = (conic + conic.transpose()) * 0.5;
        let m = Matrix2::new(sym[(0, 0)], sym[(0, 1)], sym[(1, 0)], sym[(1, 1)]);
        let lin = Vector2::new(sym[(0, 2)], sym[(1, 2)]);
        let det = m.determinant();
        if !(det.is_finite()) || det.abs() < f64::MIN_POSITIVE {
            return Err(GeomError::NotAnEllipse);
        }
        let minv = m.try_inverse().ok_or(GeomError::NotAnEllipse)?;
        let center = -(minv * lin);
        let constant = sym[(2, 2)] + lin.dot(&center);
        if constant == 0.0 {
            return Err(GeomError::NotAnEllipse);
        }
        let n = m / (-constant);
        let (p, q, r) = (n[(0, 0)], n[(0, 1)], n[(1, 1)]);
        let mean = 0.5 * (p + r);
        let half_diff = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        let mu_small = mean - half_diff;
        let mu_large = mean + half_diff;
        if !(mu_small > 0.0 && mu_large > 0.0) {
            return Err(GeomError::NotAnEllipse);
        }
        // Eigenvector of the larger eigenvalue lies at this angle; the major
        // axis is perpendicular to it.
        let minor_dir = 0.5 * (2.0 * q).atan2(p - r);
        Self::new(
            Point2::from(center),
            1.0 / mu_small.sqrt(),
            1.0 / mu_large.sqrt(),
            minor_dir + PI / 2.0,
        )
    }

    /// Counter-clockwise (positive signed area) polygon with `n` vertices.
    pub fn polygon(&self, n: usize) -> Vec<Point2<f64>> {
        let mut pts: Vec<_> = (0..n)
            .map(|i| self.point_at(2.0 * PI * i as f64 / n as f64))
            .collect();
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        pts
    }
}

fn normalize_half_turn(angle: f64) -> f64 {
    let a = angle.rem_euclid(PI);
    if a >= PI {
        0.0
    } else {
        a
    }
}

/// Head-centered gaze direction in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SphericalDirection {
    pub azimuth: f64,
    pub elevation: f64,
}

impl SphericalDirection {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// Flat az/el Euclidean distance in degrees.
    pub fn flat_distance(&self, other: &SphericalDirection) -> f64 {
        (self.azimuth - other.azimuth).hypot(self.elevation - other.elevation)
    }

    /// Great-circle angle in degrees.
    pub fn great_circle_distance(&self, other: &SphericalDirection) -> f64 {
        angle_between_deg(&azel_to_dir(self), &azel_to_dir(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle3D {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
}

impl Circle3D {
    /// Normalizes `normal`; errors on a zero normal or non-positive radius.
    pub fn new(center: Vector3<f64>, normal: Vector3<f64>, radius: f64) -> Result<Self, GeomError> {
        let len = normal.norm();
        if !(len > 0.0 && len.is_finite()) {
            return Err(GeomError::InvalidDirection);
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeomError::InvalidEllipse(format!("circle radius {radius}")));
        }
        Ok(Self {
            center,
            normal: normal / len,
            radius,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray3D {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray3D {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Back-projects a pixel into a unit ray from the camera center.
pub fn pixel_to_ray(cam: &CameraIntrinsics, p: &Point2<f64>) -> Ray3D {
    let (cx, cy) = cam.principal_point;
    let d = Vector3::new(
        (p.x - cx) / cam.focal_length,
        (p.y - cy) / cam.focal_length,
        1.0,
    );
    Ray3D {
        origin: Vector3::zeros(),
        direction: d.normalize(),
    }
}

pub fn dir_to_azel(v: &Vector3<f64>) -> Result<SphericalDirection, GeomError> {
    let len = v.norm();
    if !(len > 0.0 && len.is_finite()) {
        return Err(GeomError::InvalidDirection);
    }
    let u = v / len;
    Ok(SphericalDirection {
        azimuth: u.x.atan2(u.z).to_degrees(),
        elevation: u.y.clamp(-1.0, 1.0).asin().to_degrees(),
    })
}

pub fn azel_to_dir(d: &SphericalDirection) -> Vector3<f64> {
    let (sa, ca) = d.azimuth.to_radians().sin_cos();
    let (se, ce) = d.elevation.to_radians().sin_cos();
    Vector3::new(ce * sa, se, ce * ca)
}

/// Angle between two non-zero vectors in degrees.
pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 form stays accurate near 0° and 180°.
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Exact perspective image of a 3D circle.
pub fn project_circle(cam: &CameraIntrinsics, c: &Circle3D) -> Result<Ellipse, GeomError> {
    let n = c.normal.normalize();
    let in_plane = (1.0 - n.z * n.z).max(0.0).sqrt();
    if c.center.z - c.radius * in_plane <= 0.0 {
        return Err(GeomError::BehindCamera);
    }
    let ctr = c.center;
    let nc = n.dot(&ctr);
    // Ray λd meets the circle plane at λ = (n·c)/(n·d); the hit lies on the
    // circle iff |(n·c)d - (n·d)c|² = r²(n·d)².
    let q = Matrix3::identity() * (nc * nc) - (n * ctr.transpose() + ctr * n.transpose()) * nc
        + n * n.transpose() * (ctr.norm_squared() - c.radius * c.radius);
    let kinv = cam
        .matrix()
        .try_inverse()
        .ok_or_else(|| GeomError::InvalidIntrinsics("singular camera matrix".into()))?;
    let conic = kinv.transpose() * q * kinv;
    Ellipse::from_conic(&conic)
}

/// Returns the two 3D circles of radius `radius` whose images are `e`.
///
/// Both candidates have positive depth and normals oriented toward the
/// camera. Disambiguation is left to the caller.
pub fn unproject_ellipse(
    cam: &CameraIntrinsics,
    e: &Ellipse,
    radius: f64,
) -> Result<(Circle3D, Circle3D), GeomError> {
    if e.aspect_ratio() < 1e-6 {
        return Err(GeomError::DegenerateEllipse(e.aspect_ratio()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GeomError::InvalidEllipse(format!("circle radius {radius}")));
    }
    let k = cam.matrix();
    let mut cone = k.transpose() * e.conic() * k;
    cone = (cone + cone.transpose()) * 0.5;
    let scale = cone.abs().max();
    cone /= scale;

    let eig = SymmetricEigen::new(cone);
    let mut vals: Vec<(f64, Vector3<f64>)> = (0..3)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect();
    let positives = vals.iter().filter(|(l, _)| *l > 0.0).count();
    if positives == 1 {
        for (l, _) in vals.iter_mut() {
            *l = -*l;
        }
    } else if positives != 2 {
        return Err(GeomError::DegenerateEllipse(e.aspect_ratio()));
    }
    // λ1 ≥ λ2 > 0 > λ3
    vals.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (l1, e1) = vals[0];
    let (l2, e2) = vals[1];
    let (l3, e3) = vals[2];
    if !(l2 > 0.0 && l3 < 0.0) {
        return Err(GeomError::DegenerateEllipse(e.aspect_ratio()));
    }

    let g = ((l1 - l2) / (l1 - l3)).max(0.0).sqrt();
    let h = ((l2 - l3) / (l1 - l3)).max(0.0).sqrt();
    // Center depth assumes the cone is scaled so that λ2 = 1.
    let depth = radius / (-(l1 / l2) * (l3 / l2)).sqrt();
    let to_cam = |v: Vector3<f64>| e1 * v.x + e2 * v.y + e3 * v.z;

    let mut out = Vec::with_capacity(2);
    for s2 in [1.0, -1.0] {
        let normal = to_cam(Vector3::new(s2 * g, 0.0, -h));
        let mut center = to_cam(Vector3::new(s2 * (l3 / l2) * g, 0.0, -(l1 / l2) * h)) * depth;
        let mut normal = normal;
        if center.z < 0.0 {
            // Mirror solution through the camera center.
            center = -center;
            normal = -normal;
        }
        if normal.dot(&center) > 0.0 {
            normal = -normal;
        }
        out.push(Circle3D::new(center, normal, radius)?);
    }
    Ok((out[0], out[1]))
}

/// Intersection-over-union of two filled ellipses using 64-vertex
/// polygons and convex polygon clipping.
pub fn ellipse_iou(a: &Ellipse, b: &Ellipse) -> f64 {
    if a == b {
        return 1.0;
    }
    let pa = a.polygon(IOU_POLYGON_VERTICES);
    let pb = b.polygon(IOU_POLYGON_VERTICES);
    let area_a = signed_area(&pa);
    let area_b = signed_area(&pb);
    // Clip with the larger polygon as the clipper and average both orders
    // so the result is exactly symmetric.
    let i1 = signed_area(&clip_convex(&pa, &pb)).max(0.0);
    let i2 = signed_area(&clip_convex(&pb, &pa)).max(0.0);
    let inter = 0.5 * (i1 + i2);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub(crate) fn signed_area(poly: &[Point2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[Point2<f64>], clip: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let edge = b - a;
        let side = |p: &Point2<f64>| edge.x * (p.y - a.y) - edge.y * (p.x - a.x);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let sc = side(&cur);
            let sp = side(&prev);
            let cur_in = sc >= 0.0;
            let prev_in = sp >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_cut(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_cut(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn segment_cut(p: Point2<f64>, q: Point2<f64>, sp: f64, sq: f64) -> Point2<f64> {
    let t = sp / (sp - sq);
    p + (q - p) * t
}
