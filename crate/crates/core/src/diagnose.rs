//! Residual diagnostics: summary moments, empirical variograms and normal
//! Q-Q data for the standardized residuals of a fit.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::frame::{Grid, ImageFrame};
use crate::model::{standardized_residuals, ResidualField};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramEstimator {
    /// Half the mean squared increment.
    Matheron,
    /// Robust estimator built from square roots of absolute increments.
    CressieRobust,
}

/// Isotropic lag bins `(0, w], (w, 2w], ...` up to `max_lag`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagBins {
    pub width: f64,
    pub max_lag: f64,
}

impl LagBins {
    /// One pixel wide bins out to 15 pixels, clipped to half the diagonal.
    pub fn default_for(grid: &Grid) -> LagBins {
        LagBins {
            width: grid.pixel_size,
            max_lag: (15.0 * grid.pixel_size).min(grid.half_diagonal()),
        }
    }

    fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Domain(format!("lag bin width must be positive, got {}", self.width)));
        }
        if !(self.max_lag > 0.0) || self.max_lag > grid.half_diagonal() * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "max lag {} must lie in (0, {}]",
                self.max_lag,
                grid.half_diagonal()
            )));
        }
        Ok(())
    }

    fn count(&self) -> usize {
        (self.max_lag / self.width).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    /// Mean distance of the pairs in the bin, nm.
    pub lag: f64,
    pub pairs: u64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramEstimate {
    pub estimator: VariogramEstimator,
    pub bins: Vec<VariogramBin>,
    /// Upper edges of bins that held no pairs and were left out.
    pub empty_bins: Vec<f64>,
}

struct BinSums {
    pairs: u64,
    distance: f64,
    squared: f64,
    root_abs: f64,
}

fn accumulate(residuals: &ResidualField, bins: &LagBins) -> Result<Vec<BinSums>> {
    let grid = *residuals.grid();
    bins.validate(&grid)?;
    let a = grid.pixel_size;
    let (rows, cols) = (grid.rows as isize, grid.cols as isize);
    let v = residuals.values();
    let nb = bins.count();
    let mut sums: Vec<BinSums> = (0..nb)
        .map(|_| BinSums {
            pairs: 0,
            distance: 0.0,
            squared: 0.0,
            root_abs: 0.0,
        })
        .collect();
    let reach = (bins.max_lag / a).floor() as isize;
    // Offsets in a half-plane so every unordered pair is visited once.
    for dr in 0..=reach.min(rows - 1) {
        let dc_min = if dr == 0 { 1 } else { -reach.min(cols - 1) };
        for dc in dc_min..=reach.min(cols - 1) {
            let d = a * ((dr * dr + dc * dc) as f64).sqrt();
            if d > bins.max_lag {
                continue;
            }
            let b = ((d / bins.width).ceil() as usize).clamp(1, nb) - 1;
            let s = &mut sums[b];
            let (c0, c1) = (0.max(-dc), cols.min(cols - dc));
            let mut count = 0u64;
            for r in 0..rows - dr {
                let base = (r * cols) as usize;
                let other = ((r + dr) * cols) as usize;
                for c in c0..c1 {
                    let diff = v[other + (c + dc) as usize] - v[base + c as usize];
                    s.squared += diff * diff;
                    s.root_abs += diff.abs().sqrt();
                    count += 1;
                }
            }
            s.pairs += count;
            s.distance += d * count as f64;
        }
    }
    Ok(sums)
}

fn finish(sums: &[BinSums], bins: &LagBins, estimator: VariogramEstimator) -> VariogramEstimate {
    let mut out = Vec::new();
    let mut empty = Vec::new();
    for (i, s) in sums.iter().enumerate() {
        if s.pairs == 0 {
            empty.push(((i + 1) as f64 * bins.width).min(bins.max_lag));
            continue;
        }
        let n = s.pairs as f64;
        let gamma = match estimator {
            VariogramEstimator::Matheron => s.squared / (2.0 * n),
            VariogramEstimator::CressieRobust => {
                0.5 * (s.root_abs / n).powi(4) / (0.457 + 0.494 / n)
            }
        };
        out.push(VariogramBin {
            lag: s.distance / n,
            pairs: s.pairs,
            gamma,
        });
    }
    VariogramEstimate {
        estimator,
        bins: out,
        empty_bins: empty,
    }
}

/// Isotropic empirical variogram of a residual field.
pub fn empirical_variogram(
    residuals: &ResidualField,
    bins: &LagBins,
    estimator: VariogramEstimator,
) -> Result<VariogramEstimate> {
    let sums = accumulate(residuals, bins)?;
    Ok(finish(&sums, bins, estimator))
}

/// Both estimators from a single pass over the pairs.
pub fn empirical_variograms(
    residuals: &ResidualField,
    bins: &LagBins,
) -> Result<(VariogramEstimate, VariogramEstimate)> {
    let sums = accumulate(residuals, bins)?;
    Ok((
        finish(&sums, bins, VariogramEstimator::Matheron),
        finish(&sums, bins, VariogramEstimator::CressieRobust),
    ))
}

/// Sorted residuals paired with standard normal quantiles at `(i - 0.5) / n`,
/// as `(theoretical, empirical)`.
pub fn normal_qq(residuals: &ResidualField) -> Result<Vec<(f64, f64)>> {
    let n = residuals.values().len();
    if n < 2 {
        return Err(Error::Domain("normal Q-Q data needs at least 2 residuals".into()));
    }
    let std = Normal::standard();
    let mut sorted = residuals.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, e)| (std.inverse_cdf((i as f64 + 0.5) / n as f64), e))
        .collect())
}

/// Least-squares slope of empirical on theoretical quantiles.
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Fraction of Q-Q points in each tail used for the tail slopes.
pub const TAIL_FRACTION: f64 = 0.05;
pub const VARIANCE_BAND: (f64, f64) = (0.9, 1.1);
pub const VARIOGRAM_BAND: (f64, f64) = (0.8, 1.2);
pub const TAIL_SLOPE_BAND: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticFlag {
    ResidualVariance { value: f64 },
    VariogramBin { lag: f64, gamma: f64 },
    LowerTailSlope { value: f64 },
    UpperTailSlope { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub residual_mean: f64,
    pub residual_variance: f64,
    pub matheron: VariogramEstimate,
    pub cressie: VariogramEstimate,
    /// `(theoretical, empirical)` quantile pairs.
    pub qq: Vec<(f64, f64)>,
    pub lower_tail_slope: f64,
    pub upper_tail_slope: f64,
    pub flags: Vec<DiagnosticFlag>,
}

impl DiagnosticsReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

fn outside(v: f64, band: (f64, f64)) -> bool {
    !(v >= band.0 && v <= band.1)
}

/// Runs every diagnostic on the standardized residuals of a converged fit.
/// The robust variogram is the one checked against its band.
pub fn diagnostics_report(frame: &ImageFrame, fit: &FitResult) -> Result<DiagnosticsReport> {
    diagnostics_report_with(frame, fit, &LagBins::default_for(frame.grid()))
}

pub fn diagnostics_report_with(frame: &ImageFrame, fit: &FitResult, bins: &LagBins) -> Result<DiagnosticsReport> {
    if !fit.converged {
        return Err(Error::Domain("diagnostics need a converged fit".into()));
    }
    diagnostics_for_params(frame, &fit.params, bins)
}

/// Diagnostics of the residuals under given parameter values, for example
/// estimates read back from a saved report.
pub fn diagnostics_for_params(frame: &ImageFrame, params: &ModelParams, bins: &LagBins) -> Result<DiagnosticsReport> {
    let residuals = standardized_residuals(params, frame)?;
    let (matheron, cressie) = empirical_variograms(&residuals, bins)?;
    let qq = normal_qq(&residuals)?;
    let tail = ((qq.len() as f64 * TAIL_FRACTION).round() as usize).clamp(2, qq.len());
    let lower_tail_slope = slope(&qq[..tail]);
    let upper_tail_slope = slope(&qq[qq.len() - tail..]);
    let residual_mean = residuals.mean();
    let residual_variance = residuals.variance();

    let mut flags = Vec::new();
    if outside(residual_variance, VARIANCE_BAND) {
        flags.push(DiagnosticFlag::ResidualVariance {
            value: residual_variance,
        });
    }
    for b in &cressie.bins {
        if outside(b.gamma, VARIOGRAM_BAND) {
            flags.push(DiagnosticFlag::VariogramBin {
                lag: b.lag,
                gamma: b.gamma,
            });
        }
    }
    if outside(lower_tail_slope, TAIL_SLOPE_BAND) {
        flags.push(DiagnosticFlag::LowerTailSlope {
            value: lower_tail_slope,
        });
    }
    if outside(upper_tail_slope, TAIL_SLOPE_BAND) {
        flags.push(DiagnosticFlag::UpperTailSlope {
            value: upper_tail_slope,
        });
    }
    Ok(DiagnosticsReport {
        residual_mean,
        residual_variance,
        matheron,
        cressie,
        qq,
        lower_tail_slope,
        upper_tail_slope,
        flags,
    })
}
