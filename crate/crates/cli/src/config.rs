//! Run configuration, read from TOML and overridable from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gazebench_core::detect::DetectorParams;
use gazebench_core::gaze_model3d::{EyePriors, ModelFitFilter};
use gazebench_core::metrics::{AngularMetric, DEFAULT_DROPOUT_THRESHOLD};
use gazebench_core::synth::RigConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Native,
    Mask,
    DirectPupil,
    DirectIris,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::Native, Self::Mask, Self::DirectPupil, Self::DirectIris];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Native => "native",
            Self::Mask => "mask",
            Self::DirectPupil => "direct-pupil",
            Self::DirectIris => "direct-iris",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GazerKind {
    Feature,
    Model3d,
}

impl GazerKind {
    pub const ALL: [GazerKind; 2] = [Self::Feature, Self::Model3d];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Feature => "feature",
            Self::Model3d => "model3d",
        }
    }
}

macro_rules! impl_name_parse {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = ConfigError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|k| k.name() == s.trim())
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

impl_name_parse!(DetectorKind, "detector");
impl_name_parse!(GazerKind, "gazer");

/// Parses a comma-separated list such as `native,direct-pupil`.
pub fn parse_list<T: FromStr<Err = ConfigError> + Ord>(s: &str) -> Result<Vec<T>, ConfigError> {
    let mut out: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(T::from_str)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// Partial detector parameters applied over the resolution defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorOverrides {
    pub intensity_range: Option<u8>,
    pub pupil_size_min: Option<f64>,
    pub pupil_size_max: Option<f64>,
    pub confidence_floor: Option<f64>,
    pub iou_threshold: Option<f64>,
}

impl DetectorOverrides {
    pub fn apply(&self, mut p: DetectorParams) -> DetectorParams {
        if let Some(v) = self.intensity_range {
            p.intensity_range = v;
        }
        if let Some(v) = self.pupil_size_min {
            p.pupil_size_min = v;
        }
        if let Some(v) = self.pupil_size_max {
            p.pupil_size_max = v;
        }
        if let Some(v) = self.confidence_floor {
            p.confidence_floor = v;
        }
        if let Some(v) = self.iou_threshold {
            p.iou_threshold = v;
        }
        p
    }
}

/// Synthetic session generation for the `synth` verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of simulated subjects; subject `i` uses seed `seed + i`.
    pub subjects: usize,
    /// Square eye-camera sizes to generate, one recording per subject each.
    pub resolutions: Vec<u32>,
    pub rig: RigConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 1,
            resolutions: vec![192],
            rig: RigConfig::default(),
        }
    }
}

fn default_detectors() -> Vec<DetectorKind> {
    vec![DetectorKind::DirectPupil]
}

fn default_gazers() -> Vec<GazerKind> {
    GazerKind::ALL.to_vec()
}

fn default_threshold() -> f64 {
    DEFAULT_DROPOUT_THRESHOLD
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub recordings: Vec<PathBuf>,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<DetectorKind>,
    #[serde(default = "default_gazers")]
    pub gazers: Vec<GazerKind>,
    /// Keyed by resolution tag, e.g. `"400x400"`, or `"*"` for all.
    #[serde(default)]
    pub detector_params: BTreeMap<String, DetectorOverrides>,
    #[serde(default = "default_threshold")]
    pub dropout_threshold: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub angular_metric: AngularMetric,
    /// Fit the feature mapper on every eligible sample instead of per-target means.
    #[serde(default)]
    pub feature_raw_samples: bool,
    #[serde(default)]
    pub model_fit: ModelFitFilter,
    #[serde(default)]
    pub eye_priors: EyePriors,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Detector parameters for a resolution tag such as `192x192`.
    pub fn params_for(&self, resolution: &str) -> DetectorParams {
        let base = match parse_resolution(resolution) {
            Some((w, h)) => DetectorParams::for_resolution(w, h),
            None => DetectorParams::default(),
        };
        let base = match self.detector_params.get("*") {
            Some(o) => o.apply(base),
            None => base,
        };
        match self.detector_params.get(resolution) {
            Some(o) => o.apply(base),
            None => base,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.recordings.is_empty() {
            return bad("no recordings given".into());
        }
        if self.detectors.is_empty() || self.gazers.is_empty() {
            return bad("at least one detector and one gazer are required".into());
        }
        if !(self.dropout_threshold >= 0.0 && self.dropout_threshold.is_finite()) {
            return bad(format!("dropout_threshold {} must be non-negative", self.dropout_threshold));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.model_fit.max_aspect_ratio > 0.0 && self.model_fit.max_aspect_ratio <= 1.0) {
            return bad("model_fit.max_aspect_ratio must lie in (0, 1]".into());
        }
        for key in self.detector_params.keys() {
            if key != "*" && parse_resolution(key).is_none() {
                return bad(format!("detector_params key {key:?} is not a resolution tag"));
            }
            self.params_for(key)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("detector_params.{key}: {e}")))?;
        }
        Ok(())
    }
}

pub fn parse_resolution(tag: &str) -> Option<(u32, u32)> {
    let (w, h) = tag.split_once('x')?;
    Some((w.parse().ok()?, h.parse().ok()?))
}
