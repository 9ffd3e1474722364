use std::fs;
use std::path::{Path, PathBuf};

use gazebench::app::{main_with_args, EXIT_ALL_FAILED, EXIT_CONFIG, EXIT_INGEST, EXIT_OK};
use gazebench::config::SynthConfig;
use gazebench::generate::generate;
use gazebench::matrix::{CELLS_DIR, ERRORS_FILE, GROUPS_FILE};
use gazebench_core::recording::{ingest_recording, ELLIPSES_FILE};

fn recordings(dir: &Path, subjects: usize) -> Vec<PathBuf> {
    let cfg = SynthConfig {
        subjects,
        ..SynthConfig::default()
    };
    generate(&cfg, 3, &dir.join("recs")).unwrap()
}

fn run(args: &[&str], recs: &[PathBuf]) -> u8 {
    let mut all: Vec<String> = ["gazebench"].iter().chain(args).map(|s| s.to_string()).collect();
    all.extend(recs.iter().map(|p| p.display().to_string()));
    main_with_args(all)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(file: &Path) -> Vec<String> {
    fs::read_to_string(file).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn single_cell_yields_three_summary_rows_and_81_groups() {
    let dir = tempfile::tempdir().unwrap();
    let recs = recordings(dir.path(), 1);
    let out = dir.path().join("out");
    let code = run(
        &["run", "--detectors", "direct-pupil", "--gazers", "feature", "--out", path(&out)],
        &recs,
    );
    assert_eq!(code, EXIT_OK);
    let summary = csv_rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 3, "{summary:?}");
    let cell = out.join(CELLS_DIR).join("S01_192x192").join("direct-pupil__feature");
    assert_eq!(csv_rows(&cell.join(GROUPS_FILE)).len(), 81);
    assert!(csv_rows(&out.join(ERRORS_FILE)).is_empty());
    let sweep = csv_rows(&out.join("threshold_sweep.csv"));
    assert_eq!(sweep.len(), 51);
    assert!(out.join("plots").join("retention.svg").exists());
}

#[test]
fn removing_a_detector_leaves_other_cells_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let recs = recordings(dir.path(), 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["run", "--detectors", "direct-pupil,direct-iris", "--out", path(&a)], &recs), EXIT_OK);
    assert_eq!(run(&["run", "--detectors", "direct-pupil", "--workers", "3", "--out", path(&b)], &recs), EXIT_OK);
    for rec in ["S01_192x192", "S02_192x192"] {
        for gazer in ["feature", "model3d"] {
            let cell = Path::new(CELLS_DIR).join(rec).join(format!("direct-pupil__{gazer}"));
            for file in ["cell.toml", "groups.csv", "samples.csv"] {
                let x = fs::read(a.join(&cell).join(file)).unwrap();
                let y = fs::read(b.join(&cell).join(file)).unwrap();
                assert!(x == y, "{} differs", cell.join(file).display());
            }
        }
    }
    assert!(!b.join(CELLS_DIR).join("S01_192x192").join("direct-iris__feature").exists());
    // 1 detector × 2 gazers × 1 resolution × 3 metrics.
    assert_eq!(csv_rows(&b.join("summary.csv")).len(), 6);
}

/// Blanks every calibration-window ellipse, leaving the timestamps in place.
fn blind_calibration(rec: &Path) {
    let meta = ingest_recording(rec).unwrap().meta;
    let file = rec.join(ELLIPSES_FILE);
    let text = fs::read_to_string(&file).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let t = fields[1].parse::<f64>().ok();
        if i > 0 && t.is_some_and(|t| meta.calibration.iter().any(|ev| ev.contains(t))) {
            let blank: Vec<&str> = fields.iter().enumerate().map(|(k, f)| if k < 2 { *f } else { "" }).collect();
            out.push_str(&blank.join(","));
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    fs::write(file, out).unwrap();
}

#[test]
fn failed_calibration_lands_in_errors_csv() {
    let dir = tempfile::tempdir().unwrap();
    let recs = recordings(dir.path(), 2);
    blind_calibration(&recs[1]);
    let out = dir.path().join("out");
    assert_eq!(run(&["run", "--out", path(&out)], &recs), EXIT_OK);
    let errors = csv_rows(&out.join(ERRORS_FILE));
    assert_eq!(errors.len(), 2, "{errors:?}");
    assert!(errors.iter().any(|r| r.contains("S02_192x192") && r.contains(",model3d,InsufficientCalibration,")));
    assert!(errors.iter().any(|r| r.contains("S02_192x192") && r.contains(",feature,DegenerateCalibration,")));
    assert!(out.join(CELLS_DIR).join("S01_192x192").join("direct-pupil__model3d").exists());
    assert!(!out.join(CELLS_DIR).join("S02_192x192").exists());

    let only_bad = dir.path().join("bad");
    assert_eq!(run(&["run", "--out", path(&only_bad)], &recs[1..]), EXIT_ALL_FAILED);
    assert_eq!(csv_rows(&only_bad.join(ERRORS_FILE)).len(), 2);
}

#[test]
fn missing_sources_are_cell_errors() {
    let dir = tempfile::tempdir().unwrap();
    let recs = recordings(dir.path(), 1);
    let out = dir.path().join("out");
    assert_eq!(run(&["run", "--detectors", "native,direct-pupil", "--out", path(&out)], &recs), EXIT_OK);
    let errors = csv_rows(&out.join(ERRORS_FILE));
    assert_eq!(errors.len(), 2);
    assert!(errors.iter().all(|r| r.contains(",native,") && r.contains("MissingSource")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let recs = recordings(dir.path(), 1);
    assert_eq!(run(&["validate"], &recs), EXIT_OK);
    assert_eq!(run(&["validate"], &[dir.path().join("nope")]), EXIT_INGEST);
    assert_eq!(run(&["validate", "--gazers", "bogus"], &recs), EXIT_CONFIG);
    assert_eq!(run(&["frobnicate"], &[]), EXIT_CONFIG);
    assert_eq!(run(&["report", "--out", path(&dir.path().join("empty"))], &[]), EXIT_ALL_FAILED);

    let bad_cfg = dir.path().join("bad.toml");
    fs::write(&bad_cfg, "dropout_treshold = 5\n").unwrap();
    assert_eq!(run(&["run", "--config", path(&bad_cfg)], &recs), EXIT_CONFIG);
    let zero_workers = dir.path().join("zero.toml");
    fs::write(&zero_workers, "workers = 0\n").unwrap();
    assert_eq!(run(&["run", "--config", path(&zero_workers)], &recs), EXIT_CONFIG);

    // Two recordings with the same directory name.
    let twin = dir.path().join("twin").join("S01_192x192");
    fs::create_dir_all(twin.parent().unwrap()).unwrap();
    copy_dir(&recs[0], &twin);
    assert_eq!(run(&["run", "--out", path(&dir.path().join("o"))], &[recs[0].clone(), twin]), EXIT_CONFIG);
}

#[test]
fn config_overrides_apply_per_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let recs = recordings(dir.path(), 1);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("out");
    fs::write(
        &cfg,
        format!(
            "detectors = [\"direct-pupil\"]\ngazers = [\"feature\"]\noutput_dir = {:?}\ndropout_threshold = 0.0\n\
             [detector_params.\"192x192\"]\niou_threshold = 1.0\n",
            out
        ),
    )
    .unwrap();
    assert_eq!(run(&["run", "--config", path(&cfg)], &recs), EXIT_OK);
    let cell = fs::read_to_string(out.join(CELLS_DIR).join("S01_192x192").join("direct-pupil__feature").join("cell.toml")).unwrap();
    assert!(cell.contains("dropout_threshold = 0.0"), "{cell}");
    // A zero threshold drops everything.
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.contains("dropout_rate,1,")), "{summary}");
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            copy_dir(&p, &to.join(e.file_name()));
        } else {
            fs::copy(&p, to.join(e.file_name())).unwrap();
        }
    }
}
