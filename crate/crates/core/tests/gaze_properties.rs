use gazebench_core::detect::PupilObservation;
use gazebench_core::gaze_feature::{fit_polynomial, CalibPair, PolyMapper};
use gazebench_core::gaze_model3d::{align_world_rotation, fit_eyeball, gaze_ray, EyePriors, ModelFitFilter};
use gazebench_core::recording::EventKind;
use gazebench_core::synth::{simulate_default, RigConfig};
use gazebench_core::CameraIntrinsics;
use nalgebra::{Point2, Rotation3, Unit, Vector3};
use proptest::prelude::*;

fn world_cam() -> CameraIntrinsics {
    CameraIntrinsics::with_horizontal_fov(640, 480, 100.0).unwrap()
}

/// Pairs whose scene positions are a smooth but non-polynomial function of the pupil.
fn pairs_strategy() -> impl Strategy<Value = Vec<CalibPair>> {
    prop::collection::vec((40.0f64..150.0, 40.0f64..150.0), 8..30).prop_map(|pts| {
        pts.into_iter()
            .map(|(u, v)| CalibPair {
                pupil_center: Point2::new(u, v),
                target_scene_px: Point2::new(
                    320.0 + 3.0 * (u - 96.0) + 20.0 * (v / 30.0).sin(),
                    240.0 + 2.5 * (v - 96.0) + 0.002 * u * u,
                ),
                target_pos_3d: Vector3::new(0.0, 0.0, 1.0),
            })
            .collect()
    })
}

fn coeff_gap(a: &PolyMapper, b: &PolyMapper) -> f64 {
    a.coeffs_x
        .iter()
        .chain(&a.coeffs_y)
        .zip(b.coeffs_x.iter().chain(&b.coeffs_y))
        .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn polynomial_fit_ignores_pair_order(pairs in pairs_strategy(), k in 0usize..30) {
        let a = fit_polynomial(&pairs, &world_cam()).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let n = shuffled.len();
        shuffled.rotate_left(k % n);
        let b = fit_polynomial(&shuffled, &world_cam()).unwrap();
        prop_assert!(coeff_gap(&a, &b) < 1e-9);
    }

    #[test]
    fn residual_does_not_grow_with_a_pair_on_the_surface(pairs in pairs_strategy(), u in 50.0f64..140.0, v in 50.0f64..140.0) {
        let a = fit_polynomial(&pairs, &world_cam()).unwrap();
        let q = Point2::new(u, v);
        let mut more = pairs.clone();
        more.push(CalibPair { pupil_center: q, target_scene_px: a.scene_px(&q), target_pos_3d: Vector3::z() });
        let b = fit_polynomial(&more, &world_cam()).unwrap();
        prop_assert!(b.fit_residual_rms <= a.fit_residual_rms + 1e-9);
    }

    #[test]
    fn translated_pupils_are_absorbed(pairs in pairs_strategy(), dx in -30.0f64..30.0, dy in -30.0f64..30.0, u in 50.0f64..140.0, v in 50.0f64..140.0) {
        let a = fit_polynomial(&pairs, &world_cam()).unwrap();
        let moved: Vec<CalibPair> = pairs
            .iter()
            .map(|p| CalibPair { pupil_center: Point2::new(p.pupil_center.x + dx, p.pupil_center.y + dy), ..*p })
            .collect();
        let b = fit_polynomial(&moved, &world_cam()).unwrap();
        let q = Point2::new(u, v);
        let qa = a.scene_px(&q);
        let qb = b.scene_px(&Point2::new(u + dx, v + dy));
        prop_assert!((qa - qb).norm() < 1e-6, "{qa} vs {qb}");
    }

    #[test]
    fn alignment_is_orthonormal_and_rotation_invariant(
        dirs in prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5), 4..20),
        axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        angle in 0.0f64..3.0,
        noise in 0.0f64..0.05,
    ) {
        let axis = Vector3::new(axis.0, axis.1, axis.2);
        prop_assume!(axis.norm() > 0.1);
        let r_true = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.3, -1.0, 0.2)), 0.7);
        let eye: Vec<_> = dirs.iter().map(|(x, y)| Vector3::new(*x, *y, 1.0).normalize()).collect();
        let target: Vec<_> = eye
            .iter()
            .enumerate()
            .map(|(i, d)| (r_true * d + Vector3::new(noise * (i as f64).sin(), 0.0, 0.0)).normalize())
            .collect();
        let a = align_world_rotation(&eye, &target).unwrap();
        let r = a.rotation;
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);

        let common = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let eye2: Vec<_> = eye.iter().map(|d| common * d).collect();
        let target2: Vec<_> = target.iter().map(|d| common * d).collect();
        let b = align_world_rotation(&eye2, &target2).unwrap();
        prop_assert!((a.residual_deg - b.residual_deg).abs() < 1e-6);
    }
}

fn calibration_observations(rig: &RigConfig) -> (Vec<PupilObservation>, Vec<Vector3<f64>>) {
    let sim = simulate_default(rig).unwrap();
    let rec = &sim.recording;
    let mut obs = Vec::new();
    let mut axes = Vec::new();
    for (e, gt) in rec.ellipses.as_ref().unwrap().iter().zip(sim.ground_truth()) {
        let in_calibration = rec
            .meta
            .calibration
            .iter()
            .any(|ev| ev.kind == EventKind::Calibration && ev.contains(e.timestamp));
        if !in_calibration || e.pupil.is_none() {
            continue;
        }
        obs.push(PupilObservation {
            timestamp: e.timestamp,
            pupil: e.pupil,
            iris: e.iris,
            confidence: 1.0,
            calibration_eligible: true,
        });
        let head = gazebench_core::geom::azel_to_dir(&gazebench_core::SphericalDirection::new(gt.azimuth, gt.elevation));
        axes.push(rig.head_to_eye_cam() * head);
    }
    (obs, axes)
}

#[test]
fn noiseless_fit_recovers_center_and_gaze() {
    let rig = RigConfig::default();
    let (obs, axes) = calibration_observations(&rig);
    let model = fit_eyeball(&obs, &rig.eye_cam, &ModelFitFilter::default(), &EyePriors::default()).unwrap();
    assert!((model.center - rig.eyeball_center()).norm() < 1e-3);
    for (o, axis) in obs.iter().zip(&axes) {
        let r = gaze_ray(&model, &rig.eye_cam, o).unwrap().unwrap();
        assert!(gazebench_core::geom::angle_between_deg(&r.ray.direction, axis) < 1.0);
        assert_eq!(gaze_ray(&model, &rig.eye_cam, o).unwrap().unwrap(), r);
    }
}

#[test]
fn fit_ignores_observation_order() {
    let rig = RigConfig {
        noise_sigma_px: 0.5,
        seed: 3,
        ..RigConfig::default()
    };
    let (obs, _) = calibration_observations(&rig);
    let fit = |o: &[PupilObservation]| {
        fit_eyeball(o, &rig.eye_cam, &ModelFitFilter::default(), &EyePriors::default()).unwrap()
    };
    let a = fit(&obs);
    assert!(a.diagnostics.converged);
    let mut reversed = obs.clone();
    reversed.reverse();
    let mut rotated = obs.clone();
    rotated.rotate_left(obs.len() / 3);
    for other in [reversed, rotated] {
        assert!((fit(&other).center - a.center).norm() < 1e-6);
    }
}

#[test]
fn center_error_does_not_shrink_with_more_noise() {
    let mut medians = Vec::new();
    for sigma in [0.25, 0.5, 1.0] {
        let mut errs: Vec<f64> = (0..10)
            .map(|seed| {
                let rig = RigConfig {
                    noise_sigma_px: sigma,
                    seed,
                    ..RigConfig::default()
                };
                let (obs, _) = calibration_observations(&rig);
                let m = match fit_eyeball(&obs, &rig.eye_cam, &ModelFitFilter::default(), &EyePriors::default()) {
                    Ok(m) => m,
                    Err(gazebench_core::gaze_model3d::Model3dError::NonConvergentFit(m)) => *m,
                    Err(e) => panic!("{e}"),
                };
                (m.center - rig.eyeball_center()).norm()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(0.5 * (errs[4] + errs[5]));
    }
    assert!(medians[0] <= medians[1] && medians[1] <= medians[2], "{medians:?}");
}
