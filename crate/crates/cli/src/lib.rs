//! Batch harness: ingest recordings, run the detector × gazer matrix,
//! compute metrics and write CSV reports with SVG plots.

pub mod app;
pub mod config;
pub mod format;
pub mod generate;
pub mod matrix;
pub mod pipeline;
pub mod plot;
pub mod report;
