//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration error,
//! 3 ingestion error, 4 every cell errored (or no completed cell to report).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_list, ConfigError, DetectorKind, GazerKind, RunConfig};
use crate::generate::{generate, GenerateError};
use crate::matrix::{ingest_all, run_matrix, MatrixError};
use crate::report::{emit_report, emit_sweep, ReportError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INGEST: u8 = 3;
pub const EXIT_ALL_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "gazebench", version, about = "Gaze-estimation pipeline evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic recordings.
    Synth(CommonArgs),
    /// Run the detector × gazer matrix, then write the report.
    Run(CommonArgs),
    /// Write summary CSVs and plots from an existing run directory.
    Report(CommonArgs),
    /// Write the dropout-threshold retention curve from an existing run directory.
    Sweep(CommonArgs),
    /// Ingest recordings and report validation errors only.
    Validate(CommonArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of native,mask,direct-pupil,direct-iris.
    #[arg(long)]
    pub detectors: Option<String>,
    /// Comma-separated subset of feature,model3d.
    #[arg(long)]
    pub gazers: Option<String>,
    #[arg(long)]
    pub dropout_threshold: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Base seed for `synth`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory: run results, or recordings for `synth` (default `recordings`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recording directories, added to those in the config.
    pub recordings: Vec<PathBuf>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.recordings.extend(self.recordings.iter().cloned());
        if let Some(d) = &self.detectors {
            cfg.detectors = parse_list::<DetectorKind>(d)?;
        }
        if let Some(g) = &self.gazers {
            cfg.gazers = parse_list::<GazerKind>(g)?;
        }
        if let Some(t) = self.dropout_threshold {
            cfg.dropout_threshold = t;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.synth.rig.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    code
}

fn matrix_code(e: &MatrixError) -> u8 {
    match e {
        MatrixError::Config(_) => EXIT_CONFIG,
        MatrixError::Ingest { .. } => EXIT_INGEST,
        MatrixError::AllCellsFailed(_) => EXIT_ALL_FAILED,
        MatrixError::Io(_) => EXIT_FAILURE,
    }
}

fn report_code(e: &ReportError) -> u8 {
    match e {
        ReportError::NoCells(_) => EXIT_ALL_FAILED,
        _ => EXIT_FAILURE,
    }
}

fn run_synth(args: &CommonArgs) -> u8 {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("recordings"));
    match generate(&cfg.synth, cfg.synth.rig.seed, &out) {
        Ok(dirs) => {
            for d in dirs {
                println!("{}", d.display());
            }
            EXIT_OK
        }
        Err(GenerateError::Synth(e)) => fail(EXIT_CONFIG, e),
        Err(e) => fail(EXIT_FAILURE, e),
    }
}

fn run_run(args: &CommonArgs) -> u8 {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    match run_matrix(&cfg) {
        Ok(s) => {
            println!("{} cells, {} errored", s.cells, s.errored);
            match emit_report(&cfg.output_dir) {
                Ok(_) => EXIT_OK,
                Err(e) => fail(report_code(&e), e),
            }
        }
        Err(e) => fail(matrix_code(&e), e),
    }
}

fn run_report(args: &CommonArgs, sweep_only: bool) -> u8 {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let result = if sweep_only {
        emit_sweep(&cfg.output_dir).map(|_| ())
    } else {
        emit_report(&cfg.output_dir).map(|_| ())
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => fail(report_code(&e), e),
    }
}

fn run_validate(args: &CommonArgs) -> u8 {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if cfg.recordings.is_empty() {
        return fail(EXIT_CONFIG, "no recordings given");
    }
    match ingest_all(&cfg.recordings) {
        Ok(recs) => {
            for r in recs {
                println!(
                    "ok {} ({} calibration, {} assessment windows)",
                    r.name,
                    r.meta.calibration.len(),
                    r.meta.assessment.len()
                );
            }
            EXIT_OK
        }
        Err(e) => fail(matrix_code(&e), e),
    }
}

/// Parses `args` (including the program name) and runs the verb.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Run(a) => run_run(a),
        Command::Report(a) => run_report(a, false),
        Command::Sweep(a) => run_report(a, true),
        Command::Validate(a) => run_validate(a),
    }
}
