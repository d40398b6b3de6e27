//! Interval estimates from a fitted model: standard errors, chi-square
//! quantiles and per-bead confidence ellipses.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::fit::FitResult;

/// Inverse of a symmetric positive-definite information matrix.
pub fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !info.is_square() || info.nrows() == 0 {
        return Err(Error::Domain(format!(
            "information matrix must be square and nonempty, got {}x{}",
            info.nrows(),
            info.ncols()
        )));
    }
    if info.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("information matrix has non-finite entries".into()));
    }
    let sym = (info + info.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let (min, max) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    // Eigenvalues at rounding level relative to the largest count as zero.
    if !(min > max * 1e-15 * sym.nrows() as f64) {
        return Err(Error::NotPositiveDefinite { eigenvalue: min });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let v = &eig.eigenvectors;
    let cov = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Ok((&cov + cov.transpose()) * 0.5)
}

/// `SE_k = sqrt((J^-1)_kk)` for a positive-definite information matrix `J`.
pub fn standard_errors(info: &DMatrix<f64>) -> Result<Vec<f64>> {
    let cov = invert_information(info)?;
    Ok(cov.diagonal().iter().map(|v| v.sqrt()).collect())
}

/// Inverse CDF of the chi-square distribution with `df` degrees of freedom,
/// by safeguarded Newton iteration on the regularized lower incomplete gamma
/// function.
pub fn chi_square_quantile(prob: f64, df: u32) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("probability must lie in (0, 1), got {prob}")));
    }
    if df == 0 {
        return Err(Error::Domain("degrees of freedom must be positive".into()));
    }
    let k = df as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(k, x / 2.0);
    let ln_norm = k * std::f64::consts::LN_2 + ln_gamma(k);
    let pdf = |x: f64| ((k - 1.0) * x.ln() - x / 2.0 - ln_norm).exp();

    let mut lo = 0.0;
    let mut hi = (df as f64).max(1.0);
    while cdf(hi) < prob {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = cdf(x) - prob;
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = pdf(x);
        let newton = x - fx / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-14 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Confidence region `{mu : (mu_hat - mu)' Sigma^-1 (mu_hat - mu) <= q}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEllipse {
    /// Estimated bead center `(x, y)` in nm.
    pub center: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub level: f64,
    pub chi2_quantile: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle from the x-axis to the major axis, in (-pi/2, pi/2].
    pub orientation: f64,
}

impl ConfidenceEllipse {
    pub fn new(center: [f64; 2], covariance: [[f64; 2]; 2], level: f64) -> Result<Self> {
        let [[a, b], [b2, c]] = covariance;
        if (b - b2).abs() > 1e-12 * (a.abs() + c.abs()) {
            return Err(Error::Domain("ellipse covariance must be symmetric".into()));
        }
        let half_tr = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (l1, l2) = (half_tr + disc, half_tr - disc);
        if !(l2 > 0.0) {
            return Err(Error::NotPositiveDefinite { eigenvalue: l2 });
        }
        let q = chi_square_quantile(level, 2)?;
        let orientation = if disc == 0.0 { 0.0 } else { 0.5 * (2.0 * b).atan2(a - c) };
        Ok(ConfidenceEllipse {
            center,
            covariance,
            level,
            chi2_quantile: q,
            semi_major: (q * l1).sqrt(),
            semi_minor: (q * l2).sqrt(),
            orientation,
        })
    }

    pub fn area(&self) -> f64 {
        let [[a, b], [_, c]] = self.covariance;
        std::f64::consts::PI * self.chi2_quantile * (a * c - b * b).sqrt()
    }

    /// Squared Mahalanobis distance of `point` from the center.
    pub fn distance_sq(&self, point: [f64; 2]) -> f64 {
        let [[a, b], [_, c]] = self.covariance;
        let det = a * c - b * b;
        let dx = point[0] - self.center[0];
        let dy = point[1] - self.center[1];
        (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    }

    pub fn contains(&self, point: [f64; 2]) -> bool {
        self.distance_sq(point) <= self.chi2_quantile
    }
}

/// Confidence ellipse for the center of bead `bead_index` at `level`.
pub fn bead_ellipse(fit: &FitResult, bead_index: usize, level: f64) -> Result<ConfidenceEllipse> {
    let beads = fit.params.bead_count();
    if bead_index >= beads {
        return Err(Error::BeadOutOfRange {
            index: bead_index,
            beads,
        });
    }
    let cov = fit.covariance.as_ref().ok_or(Error::MissingCovariance)?;
    let (ix, iy) = (3 * bead_index, 3 * bead_index + 1);
    let bead = &fit.params.beads[bead_index];
    let off = 0.5 * (cov[(ix, iy)] + cov[(iy, ix)]);
    ConfidenceEllipse::new(
        [bead.x, bead.y],
        [[cov[(ix, ix)], off], [off, cov[(iy, iy)]]],
        level,
    )
}

/// Bonferroni-simultaneous ellipses: each of the `J` beads gets level
/// `1 - (1 - family_level) / J`, so all centers are covered jointly with
/// probability at least `family_level`.
pub fn simultaneous_ellipses(fit: &FitResult, family_level: f64) -> Result<Vec<ConfidenceEllipse>> {
    let beads = fit.params.bead_count();
    if beads == 0 {
        return Err(Error::Domain("simultaneous ellipses need at least one bead".into()));
    }
    if !(family_level > 0.0 && family_level < 1.0) {
        return Err(Error::Domain(format!(
            "family level must lie in (0, 1), got {family_level}"
        )));
    }
    let level = 1.0 - (1.0 - family_level) / beads as f64;
    (0..beads).map(|j| bead_ellipse(fit, j, level)).collect()
}
