//! Batch gaze-estimation building blocks.
//!
//! The processing chain is: eye-feature detection ([`detect`]) produces
//! per-frame [`detect::PupilObservation`]s, which are mapped to head-centered
//! gaze directions either by a polynomial feature mapper ([`gaze_feature`]) or
//! by a frozen 3D eyeball model ([`gaze_model3d`]). Gaze samples grouped per
//! fixation target are scored by [`metrics`]. [`synth`] simulates an eye rig
//! with known ground truth and [`recording`] owns the on-disk session layout.

pub mod detect;
pub mod gaze_feature;
pub mod gaze_model3d;
pub mod geom;
pub mod metrics;
pub mod recording;
pub mod synth;

pub use geom::{CameraIntrinsics, Circle3D, Ellipse, Ray3D, SphericalDirection};
