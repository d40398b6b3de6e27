//! Per-frame analysis, report assembly and the batch runner.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnose::{diagnostics_report, DiagnosticFlag, VariogramBin};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::frame::ImageFrame;
use crate::infer::{simultaneous_ellipses, ConfidenceEllipse};
use crate::io::{read_frame, FrameFormat};
use crate::params::{BeadParams, ModelParams, Param};
use crate::select::{locate_beads, IcVariant, SelectConfig, SelectionTrace, DEFAULT_LRT_THRESHOLD};
use crate::simulate::NoiseLaw;

/// Settings shared by every subcommand. Unknown keys are rejected when
/// read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the pixel size of grid-text files; required for headerless
    /// formats.
    pub pixel_size: Option<f64>,
    /// Input format; guessed from the file extension when absent.
    pub format: Option<FrameFormat>,
    pub max_beads: usize,
    pub lrt_threshold: f64,
    pub ic: IcVariant,
    /// Joint coverage of the per-bead confidence ellipses.
    pub family_level: f64,
    pub seed: Option<u64>,
    /// Instrument noise law for simulation.
    pub noise: NoiseLaw,
    pub output: Option<PathBuf>,
    /// Worker threads for batches; `None` uses all cores.
    pub jobs: Option<usize>,
    pub diagnostics: bool,
    /// Record wall-clock time per frame. Off by default so reports are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pixel_size: None,
            format: None,
            max_beads: 30,
            lrt_threshold: DEFAULT_LRT_THRESHOLD,
            ic: IcVariant::SqrtN,
            family_level: 0.95,
            seed: None,
            noise: NoiseLaw::Gaussian,
            output: None,
            jobs: None,
            diagnostics: true,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.pixel_size {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("pixel_size must be positive, got {a}")));
            }
        }
        if self.max_beads == 0 {
            return Err(Error::Config("max_beads must be at least 1".into()));
        }
        if !(self.lrt_threshold > 0.0 && self.lrt_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "lrt_threshold must be positive, got {}",
                self.lrt_threshold
            )));
        }
        if !(self.family_level > 0.0 && self.family_level < 1.0) {
            return Err(Error::Config(format!(
                "family_level must lie in (0, 1), got {}",
                self.family_level
            )));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn select_config(&self) -> SelectConfig {
        SelectConfig {
            max_beads: self.max_beads,
            lrt_threshold: self.lrt_threshold,
            ic: self.ic,
            ..SelectConfig::default()
        }
    }

    pub fn format_for(&self, path: &Path) -> FrameFormat {
        self.format.unwrap_or_else(|| FrameFormat::from_path(path))
    }
}

/// A point estimate with its standard error, when one is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeadReport {
    pub x: Estimate,
    pub y: Estimate,
    pub amplitude: Estimate,
    /// Bonferroni-simultaneous ellipse for the center.
    pub ellipse: Option<ConfidenceEllipse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub residual_mean: f64,
    pub residual_variance: f64,
    pub lower_tail_slope: f64,
    pub upper_tail_slope: f64,
    pub matheron: Vec<VariogramBin>,
    pub cressie: Vec<VariogramBin>,
    pub flags: Vec<DiagnosticFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub source: String,
    pub status: FrameStatus,
    pub error: Option<String>,
    pub selected_k: Option<usize>,
    pub beads: Vec<BeadReport>,
    /// Absent when no bead is selected, since the width is then not fitted.
    pub psf_width: Option<Estimate>,
    pub background: Option<Estimate>,
    pub instrument_var: Option<Estimate>,
    pub log_likelihood: Option<f64>,
    pub converged: Option<bool>,
    pub bound_violation: Option<bool>,
    pub truncated: Option<bool>,
    pub family_level: f64,
    /// Why standard errors or ellipses are missing, if they are.
    pub notes: Vec<String>,
    pub trace: Option<SelectionTrace>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub timing_ms: Option<f64>,
}

impl FrameReport {
    pub fn failed(source: impl Into<String>, error: &Error, family_level: f64) -> FrameReport {
        FrameReport {
            source: source.into(),
            status: FrameStatus::Failed,
            error: Some(error.to_string()),
            selected_k: None,
            beads: Vec::new(),
            psf_width: None,
            background: None,
            instrument_var: None,
            log_likelihood: None,
            converged: None,
            bound_violation: None,
            truncated: None,
            family_level,
            notes: Vec::new(),
            trace: None,
            diagnostics: None,
            timing_ms: None,
        }
    }

    /// Fitted parameters, for reports of successful frames.
    pub fn params(&self) -> Option<ModelParams> {
        let background = self.background?.value;
        let instrument_var = self.instrument_var?.value;
        let beads = self
            .beads
            .iter()
            .map(|b| BeadParams::new(b.x.value, b.y.value, b.amplitude.value))
            .collect::<Vec<_>>();
        let psf_width = match self.psf_width {
            Some(e) => e.value,
            None if beads.is_empty() => 1.0,
            None => return None,
        };
        Some(ModelParams::new(beads, psf_width, background, instrument_var))
    }
}

fn estimate(fit: &FitResult, param: Param, value: f64) -> Estimate {
    Estimate {
        value,
        se: fit.std_error(param),
    }
}

/// Builds the report for a selected fit. Missing standard errors, ellipses
/// or diagnostics are noted rather than treated as failures.
pub fn build_report(
    source: &str,
    frame: &ImageFrame,
    fit: &FitResult,
    trace: SelectionTrace,
    config: &RunConfig,
) -> FrameReport {
    let mut notes = Vec::new();
    if let Some(e) = &fit.information_error {
        notes.push(format!("standard errors unavailable: {e}"));
    }
    let k = fit.params.bead_count();
    let ellipses = if k > 0 && fit.covariance.is_some() {
        match simultaneous_ellipses(fit, config.family_level) {
            Ok(e) => e.into_iter().map(Some).collect(),
            Err(e) => {
                notes.push(format!("ellipses unavailable: {e}"));
                vec![None; k]
            }
        }
    } else {
        vec![None; k]
    };
    let beads = fit
        .params
        .beads
        .iter()
        .zip(ellipses)
        .enumerate()
        .map(|(j, (b, ellipse))| BeadReport {
            x: estimate(fit, Param::X(j), b.x),
            y: estimate(fit, Param::Y(j), b.y),
            amplitude: estimate(fit, Param::Amplitude(j), b.amplitude),
            ellipse,
        })
        .collect();
    let diagnostics = if !config.diagnostics {
        None
    } else {
        match diagnostics_report(frame, fit) {
            Ok(d) => Some(DiagnosticsSummary {
                residual_mean: d.residual_mean,
                residual_variance: d.residual_variance,
                lower_tail_slope: d.lower_tail_slope,
                upper_tail_slope: d.upper_tail_slope,
                matheron: d.matheron.bins,
                cressie: d.cressie.bins,
                flags: d.flags,
            }),
            Err(e) => {
                notes.push(format!("diagnostics unavailable: {e}"));
                None
            }
        }
    };
    FrameReport {
        source: source.to_string(),
        status: FrameStatus::Ok,
        error: None,
        selected_k: Some(k),
        beads,
        psf_width: (k > 0).then(|| estimate(fit, Param::PsfWidth, fit.params.psf_width)),
        background: Some(estimate(fit, Param::Background, fit.params.background)),
        instrument_var: Some(estimate(fit, Param::InstrumentVar, fit.params.instrument_var)),
        log_likelihood: Some(fit.objective),
        converged: Some(fit.converged),
        bound_violation: Some(fit.bound_violation),
        truncated: Some(trace.truncated),
        family_level: config.family_level,
        notes,
        trace: Some(trace),
        diagnostics,
        timing_ms: None,
    }
}

/// Selects and fits the beads of one frame. Errors become a failed report.
pub fn analyze_frame(source: &str, frame: &ImageFrame, config: &RunConfig) -> FrameReport {
    let start = Instant::now();
    let mut report = match locate_beads(frame, &config.select_config()) {
        Ok((fit, trace)) => build_report(source, frame, &fit, trace, config),
        Err(e) => FrameReport::failed(source, &e, config.family_level),
    };
    if config.timing {
        report.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    report
}

/// Reads and analyzes one file.
pub fn analyze_path(path: &Path, config: &RunConfig) -> FrameReport {
    let source = path.display().to_string();
    let start = Instant::now();
    match read_frame(path, config.format_for(path), config.pixel_size) {
        Ok(frame) => analyze_frame(&source, &frame, config),
        Err(e) => {
            let mut report = FrameReport::failed(source, &e, config.family_level);
            if config.timing {
                report.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            }
            report
        }
    }
}

/// One report per path, in input order. Frames are analyzed independently
/// on `config.jobs` threads; only an invalid configuration is an error.
pub fn run_batch(paths: &[PathBuf], config: &RunConfig) -> Result<Vec<FrameReport>> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = config.jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| paths.par_iter().map(|p| analyze_path(p, config)).collect()))
}
