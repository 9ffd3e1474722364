//! The `synth` verb: simulated subjects written as recording directories.

use std::path::{Path, PathBuf};

use gazebench_core::recording::{write_recording, RecordingError};
use gazebench_core::synth::{simulate_default, SynthError};
use thiserror::Error;

use crate::config::SynthConfig;

#[derive(Error, Debug)]
pub enum GenerateError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Recording(#[from] RecordingError),
}

/// Writes one recording per subject and resolution under `out`, named
/// `<subject>_<resolution>`. Subject `i` (from 1) uses seed `base_seed + i - 1`.
pub fn generate(cfg: &SynthConfig, base_seed: u64, out: &Path) -> Result<Vec<PathBuf>, GenerateError> {
    let mut written = Vec::new();
    for i in 0..cfg.subjects {
        let subject = format!("S{:02}", i + 1);
        for &res in &cfg.resolutions {
            let rig = cfg.rig.clone().with_eye_resolution(res);
            let rig = gazebench_core::synth::RigConfig {
                subject_id: subject.clone(),
                seed: base_seed + i as u64,
                ..rig
            };
            let sim = simulate_default(&rig)?;
            let dir = out.join(format!("{subject}_{}", sim.recording.meta.resolution));
            write_recording(&dir, &sim.recording)?;
            written.push(dir);
        }
    }
    Ok(written)
}
