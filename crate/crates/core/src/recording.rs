//! On-disk session layout.
//!
//! ```text
//! <recording>/
//!   meta.toml          session metadata (schema_version = 1)
//!   ellipses.csv       optional ellipse stream
//!   frames/            optional grayscale frames + timestamps.txt
//!   masks/             optional label masks + timestamps.txt
//!   ground_truth.csv   optional, written by the simulator
//! ```
//!
//! `ellipses.csv` has one record per line with the header
//! `frame_index,timestamp_s,pupil_cx,pupil_cy,pupil_a,pupil_b,pupil_theta,
//! iris_cx,iris_cy,iris_a,iris_b,iris_theta,confidence`; a missing feature
//! leaves its five fields empty. Image directories hold `frame_%06d.png` (or
//! `.pgm`) with line `i` of `timestamps.txt` giving the time of frame `i`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::EllipseRecord;
use crate::geom::{CameraIntrinsics, Ellipse};

pub const SCHEMA_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.toml";
pub const ELLIPSES_FILE: &str = "ellipses.csv";
pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const TIMESTAMPS_FILE: &str = "timestamps.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

const ELLIPSE_HEADER: [&str; 13] = [
    "frame_index",
    "timestamp_s",
    "pupil_cx",
    "pupil_cy",
    "pupil_a",
    "pupil_b",
    "pupil_theta",
    "iris_cx",
    "iris_cy",
    "iris_a",
    "iris_b",
    "iris_theta",
    "confidence",
];

#[derive(Error, Debug)]
pub enum RecordingError {
    #[error("missing meta document {0}")]
    MissingMeta(PathBuf),
    #[error("invalid meta document: {0}")]
    BadMeta(String),
    #[error("recording {0} contains no ellipse stream, frames or masks")]
    NoData(PathBuf),
    #[error("{source_name}: timestamps not strictly increasing at index {index}")]
    BadTimestamps { source_name: String, index: usize },
    #[error("{source_name}: window {window} contains no samples")]
    EmptyWindow { source_name: String, window: String },
    #[error("{file}:{line}: {message}")]
    BadRecord {
        file: String,
        line: usize,
        message: String,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Calibration,
    Assessment,
}

/// A target presentation and the window during which samples are analyzed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub kind: EventKind,
    pub target_id: usize,
    /// Recording index for targets with several windows.
    #[serde(default)]
    pub repeat: usize,
    /// Head frame, meters.
    pub target_pos: [f64; 3],
    /// `[start, end)` in seconds.
    pub window: [f64; 2],
    pub samples_expected: usize,
}

impl ProtocolEvent {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.window[0] - 1e-9 && t < self.window[1] - 1e-9
    }

    pub fn label(&self, index: usize) -> String {
        match self.kind {
            EventKind::Calibration => format!("calibration[{index}]"),
            EventKind::Assessment => format!("assessment[{index}]"),
        }
    }
}

/// Simulator ground truth carried in the meta document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMeta {
    pub eyeball_center: [f64; 3],
    pub eyeball_radius: f64,
    pub pupil_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub schema_version: u32,
    pub subject_id: String,
    /// Resolution tag such as `192x192`.
    pub resolution: String,
    pub sample_rate_hz: f64,
    pub eye_camera: CameraIntrinsics,
    pub world_camera: CameraIntrinsics,
    #[serde(default)]
    pub calibration: Vec<ProtocolEvent>,
    #[serde(default)]
    pub assessment: Vec<ProtocolEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthMeta>,
}

impl SessionMeta {
    pub fn validate(&self) -> Result<(), RecordingError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(RecordingError::BadMeta(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        for cam in [&self.eye_camera, &self.world_camera] {
            cam.validate().map_err(|e| RecordingError::BadMeta(e.to_string()))?;
        }
        for (list, name) in [(&self.calibration, "calibration"), (&self.assessment, "assessment")] {
            for (i, ev) in list.iter().enumerate() {
                if !(ev.window[0] < ev.window[1]) {
                    return Err(RecordingError::BadMeta(format!("{name}[{i}] has an empty window")));
                }
                if i > 0 && ev.window[0] < list[i - 1].window[1] - 1e-9 {
                    return Err(RecordingError::BadMeta(format!(
                        "{name}[{i}] overlaps or precedes the previous window"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn events(&self) -> impl Iterator<Item = (usize, &ProtocolEvent)> {
        self.calibration
            .iter()
            .enumerate()
            .chain(self.assessment.iter().enumerate())
    }
}

/// Image frames, either in memory or referenced on disk.
#[derive(Debug, Clone)]
pub enum ImageSource {
    InMemory(Vec<GrayImage>),
    OnDisk(Vec<PathBuf>),
}

#[derive(Debug, Clone)]
pub struct ImageSequence {
    pub timestamps: Vec<f64>,
    pub images: ImageSource,
}

impl ImageSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<GrayImage, RecordingError> {
        match &self.images {
            ImageSource::InMemory(v) => Ok(v[index].clone()),
            ImageSource::OnDisk(paths) => {
                let path = &paths[index];
                image::open(path)
                    .map(|img| img.into_luma8())
                    .map_err(|e| RecordingError::Image {
                        path: path.clone(),
                        message: e.to_string(),
                    })
            }
        }
    }
}

/// A truth record per emitted sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthRecord {
    pub frame_index: u64,
    pub timestamp: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub dropped: bool,
    pub pupil: Ellipse,
    pub iris: Ellipse,
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub name: String,
    pub meta: SessionMeta,
    pub ellipses: Option<Vec<EllipseRecord>>,
    pub frames: Option<ImageSequence>,
    pub masks: Option<ImageSequence>,
    pub ground_truth: Option<Vec<GroundTruthRecord>>,
}

impl Recording {
    /// Checks timestamp monotonicity and window coverage of every source.
    pub fn validate(&self) -> Result<(), RecordingError> {
        self.meta.validate()?;
        let mut any = false;
        if let Some(recs) = &self.ellipses {
            any = true;
            let ts: Vec<f64> = recs.iter().map(|r| r.timestamp).collect();
            check_source(&self.meta, ELLIPSES_FILE, &ts)?;
        }
        for (seq, name) in [(&self.frames, FRAMES_DIR), (&self.masks, MASKS_DIR)] {
            if let Some(seq) = seq {
                any = true;
                check_source(&self.meta, name, &seq.timestamps)?;
            }
        }
        if !any {
            return Err(RecordingError::NoData(PathBuf::from(&self.name)));
        }
        Ok(())
    }
}

fn check_source(meta: &SessionMeta, source_name: &str, ts: &[f64]) -> Result<(), RecordingError> {
    for i in 1..ts.len() {
        if !(ts[i] > ts[i - 1]) {
            return Err(RecordingError::BadTimestamps {
                source_name: source_name.to_string(),
                index: i,
            });
        }
    }
    for (i, ev) in meta.events() {
        let start = ts.partition_point(|&t| t < ev.window[0] - 1e-9);
        if !(start < ts.len() && ev.contains(ts[start])) {
            return Err(RecordingError::EmptyWindow {
                source_name: source_name.to_string(),
                window: ev.label(i),
            });
        }
    }
    Ok(())
}

/// Reads and validates a recording directory.
pub fn ingest_recording(path: &Path) -> Result<Recording, RecordingError> {
    let meta_path = path.join(META_FILE);
    if !meta_path.is_file() {
        return Err(RecordingError::MissingMeta(meta_path));
    }
    let meta: SessionMeta =
        toml::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| RecordingError::BadMeta(e.to_string()))?;

    let ellipses_path = path.join(ELLIPSES_FILE);
    let ellipses = if ellipses_path.is_file() {
        Some(read_ellipses(&ellipses_path)?)
    } else {
        None
    };
    let frames = read_image_dir(&path.join(FRAMES_DIR))?;
    let masks = read_image_dir(&path.join(MASKS_DIR))?;
    let gt_path = path.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.is_file() {
        Some(read_ground_truth(&gt_path)?)
    } else {
        None
    };
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let rec = Recording {
        name,
        meta,
        ellipses,
        frames,
        masks,
        ground_truth,
    };
    rec.validate()?;
    Ok(rec)
}

fn parse_f64(field: &str, file: &str, line: usize, name: &str) -> Result<f64, RecordingError> {
    field.trim().parse::<f64>().map_err(|_| RecordingError::BadRecord {
        file: file.to_string(),
        line,
        message: format!("field {name}: cannot parse {field:?} as a number"),
    })
}

fn parse_optional_ellipse(
    fields: &[&str],
    file: &str,
    line: usize,
    prefix: &str,
) -> Result<Option<Ellipse>, RecordingError> {
    let empty = fields.iter().filter(|f| f.trim().is_empty()).count();
    if empty == fields.len() {
        return Ok(None);
    }
    if empty != 0 {
        return Err(RecordingError::BadRecord {
            file: file.to_string(),
            line,
            message: format!("{prefix} ellipse is partially specified"),
        });
    }
    let v: Vec<f64> = fields
        .iter()
        .map(|f| parse_f64(f, file, line, prefix))
        .collect::<Result<_, _>>()?;
    Ellipse::new(Point2::new(v[0], v[1]), v[2], v[3], v[4])
        .map(Some)
        .map_err(|e| RecordingError::BadRecord {
            file: file.to_string(),
            line,
            message: e.to_string(),
        })
}

pub fn read_ellipses(path: &Path) -> Result<Vec<EllipseRecord>, RecordingError> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(&file, e))?;
    let headers = reader.headers().map_err(|e| csv_error(&file, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ELLIPSE_HEADER {
        return Err(RecordingError::BadRecord {
            file,
            line: 1,
            message: format!("unexpected header, expected {}", ELLIPSE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(&file, e))?;
        let f: Vec<&str> = row.iter().collect();
        let frame_index = f[0].trim().parse::<u64>().map_err(|_| RecordingError::BadRecord {
            file: file.clone(),
            line,
            message: format!("bad frame_index {:?}", f[0]),
        })?;
        let timestamp = parse_f64(f[1], &file, line, "timestamp_s")?;
        let pupil = parse_optional_ellipse(&f[2..7], &file, line, "pupil")?;
        let iris = parse_optional_ellipse(&f[7..12], &file, line, "iris")?;
        let confidence = if f[12].trim().is_empty() {
            None
        } else {
            Some(parse_f64(f[12], &file, line, "confidence")?)
        };
        out.push(EllipseRecord {
            frame_index,
            timestamp,
            pupil,
            iris,
            confidence,
        });
    }
    Ok(out)
}

fn csv_error(file: &str, e: csv::Error) -> RecordingError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    RecordingError::BadRecord {
        file: file.to_string(),
        line,
        message: e.to_string(),
    }
}

fn push_ellipse(fields: &mut Vec<String>, e: Option<&Ellipse>) {
    match e {
        Some(e) => {
            for v in [e.center.x, e.center.y, e.semi_major, e.semi_minor, e.angle] {
                fields.push(format!("{v}"));
            }
        }
        None => fields.extend(std::iter::repeat_n(String::new(), 5)),
    }
}

pub fn write_ellipses(path: &Path, records: &[EllipseRecord]) -> Result<(), RecordingError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", ELLIPSE_HEADER.join(","))?;
    for r in records {
        let mut fields = vec![r.frame_index.to_string(), format!("{}", r.timestamp)];
        push_ellipse(&mut fields, r.pupil.as_ref());
        push_ellipse(&mut fields, r.iris.as_ref());
        fields.push(r.confidence.map(|c| format!("{c}")).unwrap_or_default());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_image_dir(dir: &Path) -> Result<Option<ImageSequence>, RecordingError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let ts_path = dir.join(TIMESTAMPS_FILE);
    let file = ts_path.display().to_string();
    let text = fs::read_to_string(&ts_path)?;
    let mut timestamps = Vec::new();
    let mut paths = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        timestamps.push(parse_f64(line, &file, i + 1, "timestamp")?);
        let png = dir.join(format!("frame_{i:06}.png"));
        let pgm = dir.join(format!("frame_{i:06}.pgm"));
        let path = if png.is_file() {
            png
        } else if pgm.is_file() {
            pgm
        } else {
            return Err(RecordingError::BadRecord {
                file: file.clone(),
                line: i + 1,
                message: format!("no image file for frame {i}"),
            });
        };
        paths.push(path);
    }
    Ok(Some(ImageSequence {
        timestamps,
        images: ImageSource::OnDisk(paths),
    }))
}

fn write_image_dir(dir: &Path, seq: &ImageSequence) -> Result<(), RecordingError> {
    fs::create_dir_all(dir)?;
    let mut ts = BufWriter::new(fs::File::create(dir.join(TIMESTAMPS_FILE))?);
    for t in &seq.timestamps {
        writeln!(ts, "{t}")?;
    }
    ts.flush()?;
    for i in 0..seq.len() {
        let img = seq.load(i)?;
        let path = dir.join(format!("frame_{i:06}.png"));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| RecordingError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
    }
    Ok(())
}

const GT_HEADER: &str = "frame_index,timestamp_s,true_azimuth_deg,true_elevation_deg,dropped,\
pupil_cx,pupil_cy,pupil_a,pupil_b,pupil_theta,iris_cx,iris_cy,iris_a,iris_b,iris_theta";

pub fn write_ground_truth(path: &Path, records: &[GroundTruthRecord]) -> Result<(), RecordingError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{GT_HEADER}")?;
    for r in records {
        let mut fields = vec![
            r.frame_index.to_string(),
            format!("{}", r.timestamp),
            format!("{}", r.azimuth),
            format!("{}", r.elevation),
            (r.dropped as u8).to_string(),
        ];
        push_ellipse(&mut fields, Some(&r.pupil));
        push_ellipse(&mut fields, Some(&r.iris));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthRecord>, RecordingError> {
    let file = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(&file, e))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(&file, e))?;
        let f: Vec<&str> = row.iter().collect();
        if f.len() != 15 {
            return Err(RecordingError::BadRecord {
                file,
                line,
                message: format!("expected 15 fields, found {}", f.len()),
            });
        }
        let missing = |name: &str| RecordingError::BadRecord {
            file: file.clone(),
            line,
            message: format!("missing {name} ellipse"),
        };
        out.push(GroundTruthRecord {
            frame_index: parse_f64(f[0], &file, line, "frame_index")? as u64,
            timestamp: parse_f64(f[1], &file, line, "timestamp_s")?,
            azimuth: parse_f64(f[2], &file, line, "true_azimuth_deg")?,
            elevation: parse_f64(f[3], &file, line, "true_elevation_deg")?,
            dropped: f[4].trim() == "1",
            pupil: parse_optional_ellipse(&f[5..10], &file, line, "pupil")?.ok_or_else(|| missing("pupil"))?,
            iris: parse_optional_ellipse(&f[10..15], &file, line, "iris")?.ok_or_else(|| missing("iris"))?,
        });
    }
    Ok(out)
}

/// Writes a recording directory. Output bytes depend only on the recording.
pub fn write_recording(dir: &Path, rec: &Recording) -> Result<(), RecordingError> {
    fs::create_dir_all(dir)?;
    let meta = toml::to_string(&rec.meta).map_err(|e| RecordingError::BadMeta(e.to_string()))?;
    fs::write(dir.join(META_FILE), meta)?;
    if let Some(e) = &rec.ellipses {
        write_ellipses(&dir.join(ELLIPSES_FILE), e)?;
    }
    if let Some(f) = &rec.frames {
        write_image_dir(&dir.join(FRAMES_DIR), f)?;
    }
    if let Some(m) = &rec.masks {
        write_image_dir(&dir.join(MASKS_DIR), m)?;
    }
    if let Some(gt) = &rec.ground_truth {
        write_ground_truth(&dir.join(GROUND_TRUTH_FILE), gt)?;
    }
    Ok(())
}
