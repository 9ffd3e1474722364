//! Feature-based gaze estimation: a bivariate quadratic map from eye-image
//! pupil centers to world-camera pixels, fit on calibration fixations.
//!
//! The world camera sits at the head origin looking along head +z, with its
//! image rows running toward head −y.

use nalgebra::{DMatrix, DVector, Point2, Vector3};
use thiserror::Error;

use crate::detect::PupilObservation;
use crate::geom::{dir_to_azel, pixel_to_ray, CameraIntrinsics, SphericalDirection};

pub const BASIS_LEN: usize = 6;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FeatureGazeError {
    #[error("degenerate calibration: design matrix rank {rank} < 6 with {pairs} pairs")]
    DegenerateCalibration { rank: usize, pairs: usize },
    #[error("calibration target {0:?} is not in front of the world camera")]
    TargetBehindCamera([f64; 3]),
}

/// One calibration correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibPair {
    pub pupil_center: Point2<f64>,
    pub target_scene_px: Point2<f64>,
    pub target_pos_3d: Vector3<f64>,
}

impl CalibPair {
    /// Builds a pair, projecting the head-frame target into the world camera.
    pub fn new(
        pupil_center: Point2<f64>,
        target_pos_3d: Vector3<f64>,
        world_cam: &CameraIntrinsics,
    ) -> Result<Self, FeatureGazeError> {
        let target_scene_px = head_point_to_scene_px(world_cam, &target_pos_3d).ok_or(
            FeatureGazeError::TargetBehindCamera([target_pos_3d.x, target_pos_3d.y, target_pos_3d.z]),
        )?;
        Ok(Self {
            pupil_center,
            target_scene_px,
            target_pos_3d,
        })
    }
}

/// Head frame (y up) to world-camera frame (y down).
fn head_to_scene_cam(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, -v.y, v.z)
}

pub fn head_point_to_scene_px(world_cam: &CameraIntrinsics, p: &Vector3<f64>) -> Option<Point2<f64>> {
    world_cam.project(&head_to_scene_cam(p))
}

/// Head-centered direction of a world-camera pixel.
pub fn scene_px_to_direction(world_cam: &CameraIntrinsics, px: &Point2<f64>) -> SphericalDirection {
    let d = pixel_to_ray(world_cam, px).direction;
    dir_to_azel(&head_to_scene_cam(&d)).expect("pixel rays are unit length")
}

fn basis(p: &Point2<f64>) -> [f64; BASIS_LEN] {
    let (u, v) = (p.x, p.y);
    [1.0, u, v, u * u, u * v, v * v]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyMapper {
    /// Coefficients over `[1, u, v, u², uv, v²]` for the scene x pixel.
    pub coeffs_x: [f64; BASIS_LEN],
    pub coeffs_y: [f64; BASIS_LEN],
    pub world_cam: CameraIntrinsics,
    pub fit_residual_rms: f64,
}

impl PolyMapper {
    pub fn scene_px(&self, pupil_center: &Point2<f64>) -> Point2<f64> {
        let b = basis(pupil_center);
        let dot = |c: &[f64; BASIS_LEN]| c.iter().zip(b.iter()).map(|(c, b)| c * b).sum::<f64>();
        Point2::new(dot(&self.coeffs_x), dot(&self.coeffs_y))
    }
}

/// Least-squares fit of both output polynomials.
///
/// Columns are scaled to unit norm before the SVD so the rank test is not
/// swamped by the u²/1 magnitude ratio; coefficients are unscaled afterwards.
pub fn fit_polynomial(
    pairs: &[CalibPair],
    world_cam: &CameraIntrinsics,
) -> Result<PolyMapper, FeatureGazeError> {
    let n = pairs.len();
    if n < BASIS_LEN {
        return Err(FeatureGazeError::DegenerateCalibration { rank: n, pairs: n });
    }
    let mut design = DMatrix::<f64>::zeros(n, BASIS_LEN);
    for (i, pair) in pairs.iter().enumerate() {
        for (j, b) in basis(&pair.pupil_center).iter().enumerate() {
            design[(i, j)] = *b;
        }
    }
    let scales: Vec<f64> = (0..BASIS_LEN)
        .map(|j| {
            let s = design.column(j).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scales.iter().enumerate() {
        design.column_mut(j).scale_mut(1.0 / s);
    }

    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * 1e-10 * n as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < BASIS_LEN {
        return Err(FeatureGazeError::DegenerateCalibration { rank, pairs: n });
    }

    let solve = |target: DVector<f64>| -> [f64; BASIS_LEN] {
        let sol = svd.solve(&target, tol).expect("SVD computed with U and V");
        let mut out = [0.0; BASIS_LEN];
        for j in 0..BASIS_LEN {
            out[j] = sol[j] / scales[j];
        }
        out
    };
    let coeffs_x = solve(DVector::from_iterator(n, pairs.iter().map(|p| p.target_scene_px.x)));
    let coeffs_y = solve(DVector::from_iterator(n, pairs.iter().map(|p| p.target_scene_px.y)));

    let mut mapper = PolyMapper {
        coeffs_x,
        coeffs_y,
        world_cam: *world_cam,
        fit_residual_rms: 0.0,
    };
    let sq: f64 = pairs
        .iter()
        .map(|p| (mapper.scene_px(&p.pupil_center) - p.target_scene_px).norm_squared())
        .sum();
    mapper.fit_residual_rms = (sq / n as f64).sqrt();
    Ok(mapper)
}

/// Maps an observation to a head-centered direction; `None` is a dropout.
pub fn map_gaze(mapper: &PolyMapper, obs: &PupilObservation) -> Option<SphericalDirection> {
    let pupil = obs.pupil?;
    let px = mapper.scene_px(&pupil.center);
    Some(scene_px_to_direction(&mapper.world_cam, &px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Ellipse;

    fn world() -> CameraIntrinsics {
        CameraIntrinsics::with_horizontal_fov(640, 480, 100.0).unwrap()
    }

    const TRUE_X: [f64; 6] = [12.0, 1.5, -0.3, 0.002, 0.001, -0.0015];
    const TRUE_Y: [f64; 6] = [-4.0, 0.2, 1.8, -0.001, 0.0025, 0.0005];

    fn exact_pairs(n: usize) -> Vec<CalibPair> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                let p = Point2::new(60.0 + 7.0 * (t * 1.3).sin() * (1.0 + t / 9.0), 90.0 + 9.0 * (t * 0.7).cos());
                let b = basis(&p);
                let eval = |c: &[f64; 6]| c.iter().zip(b.iter()).map(|(c, b)| c * b).sum::<f64>();
                CalibPair {
                    pupil_center: p,
                    target_scene_px: Point2::new(eval(&TRUE_X), eval(&TRUE_Y)),
                    target_pos_3d: Vector3::z(),
                }
            })
            .collect()
    }

    #[test]
    fn exact_quadratic_recovered() {
        let m = fit_polynomial(&exact_pairs(18), &world()).unwrap();
        for j in 0..6 {
            assert!((m.coeffs_x[j] - TRUE_X[j]).abs() <= 1e-6 * TRUE_X[j].abs(), "x{j}");
            assert!((m.coeffs_y[j] - TRUE_Y[j]).abs() <= 1e-6 * TRUE_Y[j].abs(), "y{j}");
        }
        assert!(m.fit_residual_rms <= 1e-6);
    }

    #[test]
    fn five_pairs_is_degenerate() {
        assert!(matches!(
            fit_polynomial(&exact_pairs(5), &world()),
            Err(FeatureGazeError::DegenerateCalibration { pairs: 5, .. })
        ));
    }

    #[test]
    fn collinear_pupils_are_degenerate() {
        let mut pairs = exact_pairs(10);
        for (i, p) in pairs.iter_mut().enumerate() {
            p.pupil_center = Point2::new(i as f64, 2.0 * i as f64);
        }
        match fit_polynomial(&pairs, &world()) {
            Err(FeatureGazeError::DegenerateCalibration { rank, .. }) => assert!(rank < 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_mapper_at_principal_point_is_straight_ahead() {
        let cam = world();
        let m = PolyMapper {
            coeffs_x: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            coeffs_y: [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            world_cam: cam,
            fit_residual_rms: 0.0,
        };
        let (cx, cy) = cam.principal_point;
        let obs = PupilObservation {
            timestamp: 0.0,
            pupil: Some(Ellipse::circle(Point2::new(cx, cy), 10.0).unwrap()),
            iris: None,
            confidence: 1.0,
            calibration_eligible: true,
        };
        let d = map_gaze(&m, &obs).unwrap();
        assert!(d.azimuth.abs() < 1e-12 && d.elevation.abs() < 1e-12);
        assert!(map_gaze(&m, &PupilObservation::absent(0.0)).is_none());
    }

    #[test]
    fn scene_projection_round_trip() {
        let cam = world();
        let target = Vector3::new(0.2, 0.3, 1.1);
        let px = head_point_to_scene_px(&cam, &target).unwrap();
        // Upward targets land above the principal point.
        assert!(px.y < cam.principal_point.1);
        let d = scene_px_to_direction(&cam, &px);
        let truth = dir_to_azel(&target).unwrap();
        assert!(d.flat_distance(&truth) < 1e-9);
    }
}
