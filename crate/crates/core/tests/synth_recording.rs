use std::fs;
use std::path::Path;

use gazebench_core::geom::project_circle;
use gazebench_core::metrics::{group_metrics, AngularMetric, FixationGroup, GazeSample};
use gazebench_core::recording::{
    ingest_recording, write_recording, RecordingError, ELLIPSES_FILE, GROUND_TRUTH_FILE, MASKS_DIR, META_FILE,
};
use gazebench_core::synth::{
    gen_assessment_protocol, gen_calibration_protocol, simulate_default, simulate_recording, RigConfig,
};
use gazebench_core::SphericalDirection;
use nalgebra::Vector3;
use proptest::prelude::*;

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A short session: full calibration, the first three assessment windows, masks rendered.
fn small_session(seed: u64) -> gazebench_core::synth::SimulatedRecording {
    let rig = RigConfig {
        seed,
        noise_sigma_px: 0.5,
        dropout_prob: 0.1,
        render_masks: true,
        ..RigConfig::default()
    };
    let assessment = gen_assessment_protocol(&rig);
    simulate_recording(&rig, &gen_calibration_protocol(&rig), &assessment[..3]).unwrap()
}

#[test]
fn recording_round_trips_through_disk() {
    let sim = small_session(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("S01");
    write_recording(&path, &sim.recording).unwrap();
    let back = ingest_recording(&path).unwrap();
    assert_eq!(back.name, "S01");
    assert_eq!(back.meta, sim.recording.meta);
    assert_eq!(back.ellipses, sim.recording.ellipses);
    assert_eq!(back.ground_truth, sim.recording.ground_truth);
    let (m0, m1) = (sim.recording.masks.as_ref().unwrap(), back.masks.as_ref().unwrap());
    assert_eq!(m0.timestamps, m1.timestamps);
    for i in [0, m0.len() / 2, m0.len() - 1] {
        assert_eq!(m0.load(i).unwrap(), m1.load(i).unwrap());
    }
    assert!(back.frames.is_none());
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        write_recording(&dir.path().join(name), &small_session(9).recording).unwrap();
    }
    write_recording(&dir.path().join("c"), &small_session(10).recording).unwrap();
    let a = tree(&dir.path().join("a"));
    assert!(a.iter().any(|(p, _)| p.starts_with(MASKS_DIR)));
    assert_eq!(a, tree(&dir.path().join("b")));
    assert_ne!(a, tree(&dir.path().join("c")));
}

fn rewrite_ellipses(path: &Path, edit: impl FnOnce(&mut Vec<String>)) {
    let file = path.join(ELLIPSES_FILE);
    let text = fs::read_to_string(&file).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    edit(&mut lines);
    fs::write(&file, lines.join("\n") + "\n").unwrap();
}

fn ellipse_only_session(dir: &Path) -> gazebench_core::recording::Recording {
    let rec = simulate_default(&RigConfig::default()).unwrap().recording;
    write_recording(dir, &rec).unwrap();
    fs::remove_file(dir.join(GROUND_TRUTH_FILE)).unwrap();
    rec
}

#[test]
fn emptied_window_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let rec = ellipse_only_session(dir.path());
    let window = rec.meta.assessment[4].clone();
    rewrite_ellipses(dir.path(), |lines| {
        lines.retain(|l| match l.split(',').nth(1).and_then(|t| t.parse::<f64>().ok()) {
            Some(t) => !window.contains(t),
            None => true,
        })
    });
    match ingest_recording(dir.path()) {
        Err(RecordingError::EmptyWindow { window, .. }) => assert_eq!(window, "assessment[4]"),
        other => panic!("expected EmptyWindow, got {other:?}"),
    }
}

#[test]
fn out_of_order_timestamps_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    ellipse_only_session(dir.path());
    rewrite_ellipses(dir.path(), |lines| lines.swap(100, 101));
    assert!(matches!(
        ingest_recording(dir.path()),
        Err(RecordingError::BadTimestamps { index: 100, .. })
    ));
}

#[test]
fn missing_meta_and_data_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ingest_recording(dir.path()), Err(RecordingError::MissingMeta(_))));
    ellipse_only_session(dir.path());
    fs::remove_file(dir.path().join(ELLIPSES_FILE)).unwrap();
    assert!(matches!(ingest_recording(dir.path()), Err(RecordingError::NoData(_))));
    fs::write(dir.path().join(META_FILE), "schema_version = 1\n").unwrap();
    assert!(matches!(ingest_recording(dir.path()), Err(RecordingError::BadMeta(_))));
}

#[test]
fn truth_sidecar_scores_perfectly() {
    let rig = RigConfig {
        dropout_prob: 0.2,
        seed: 11,
        ..RigConfig::default()
    };
    let sim = simulate_default(&rig).unwrap();
    let meta = &sim.recording.meta;
    let mut total = 0usize;
    let mut dropped = 0usize;
    for ev in &meta.assessment {
        let samples: Vec<GazeSample> = sim
            .ground_truth()
            .iter()
            .filter(|g| ev.contains(g.timestamp))
            .map(|g| GazeSample {
                timestamp: g.timestamp,
                direction: (!g.dropped).then(|| SphericalDirection::new(g.azimuth, g.elevation)),
            })
            .collect();
        let first = sim.ground_truth().iter().find(|g| ev.contains(g.timestamp)).unwrap();
        let group = FixationGroup::new(samples, SphericalDirection::new(first.azimuth, first.elevation));
        let m = group_metrics(&group, 10.0, AngularMetric::Flat).unwrap();
        if let Some(acc) = m.err_acc {
            assert!(acc.abs() < 1e-12);
        }
        total += m.n_total;
        dropped += m.n_total - m.n_retained;
    }
    let rate = dropped as f64 / total as f64;
    let tol = 3.0 * (0.2 * 0.8 / total as f64).sqrt();
    assert!((rate - 0.2).abs() <= tol, "{rate} over {total}");
}

/// Aspect ratio of the noiseless pupil image at `angle_deg` from the camera-facing axis.
fn aspect_at(rig: &RigConfig, angle_deg: f64, phi: f64) -> f64 {
    let facing = -rig.eyeball_center().normalize();
    let u = facing.cross(&Vector3::x()).normalize();
    let v = facing.cross(&u);
    let a = angle_deg.to_radians();
    let axis = facing * a.cos() + (u * phi.cos() + v * phi.sin()) * a.sin();
    let (pupil, _) = rig.eye_circles(&(rig.head_to_eye_cam().transpose() * axis));
    project_circle(&rig.eye_cam, &pupil).unwrap().aspect_ratio()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aspect_falls_with_eccentricity(phi in 0.0f64..std::f64::consts::TAU) {
        let rig = RigConfig::default();
        let aspects: Vec<f64> = (0..=12).map(|k| aspect_at(&rig, 5.0 * k as f64, phi)).collect();
        prop_assert!(aspects.windows(2).all(|w| w[1] < w[0]), "{aspects:?}");
    }
}
