//! The Gaussian-sum intensity surface and the approximate log-likelihood.
//!
//! The expected count at pixel `i` is
//!
//! ```text
//! f_i = B + sum_j A_j * exp(-((x_i - x_j)^2 + (y_i - y_j)^2) / S^2)
//! ```
//!
//! evaluated at the pixel center, with the pixel area absorbed into `A_j` and
//! `B`. Counts are modelled as `Z_i ~ N(f_i, f_i + theta)`, giving
//!
//! ```text
//! l_n = -sum_i ln(f_i + theta) - sum_i (z_i - f_i)^2 / (f_i + theta)
//! ```
//!
//! Note that `l_n` is twice the Gaussian log-likelihood (up to an additive
//! constant). Curvature-based quantities elsewhere in the crate use `l_n / 2`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::frame::{Grid, ImageFrame};
use crate::params::{BeadParams, ModelParams, ParamLayout};

/// Bead terms with `d^2 / S^2` above this are dropped when rendering whole
/// frames; `exp(-50)` is below the f64 resolution of any count plus background.
const WINDOW_EXPONENT: f64 = 50.0;

/// Expected count at one pixel using the pixel-center (midpoint) value.
pub fn intensity_midpoint(params: &ModelParams, grid: &Grid, pixel_index: usize) -> Result<f64> {
    grid.check_index(pixel_index)?;
    let (xi, yi) = grid.center(pixel_index);
    let s2 = params.psf_width * params.psf_width;
    let beads: f64 = params
        .beads
        .iter()
        .map(|b| {
            let d2 = (xi - b.x).powi(2) + (yi - b.y).powi(2);
            b.amplitude * (-d2 / s2).exp()
        })
        .sum();
    Ok(params.background + beads)
}

/// Expected count at one pixel by integrating the surface over the pixel
/// area, divided by the area so the result is in the same units as
/// [`intensity_midpoint`].
pub fn intensity_exact(params: &ModelParams, grid: &Grid, pixel_index: usize) -> Result<f64> {
    grid.check_index(pixel_index)?;
    let (xi, yi) = grid.center(pixel_index);
    let a = grid.pixel_size;
    let s = params.psf_width;
    let beads: f64 = params
        .beads
        .iter()
        .map(|b| b.amplitude * pixel_average(xi - b.x, a, s) * pixel_average(yi - b.y, a, s))
        .sum();
    Ok(params.background + beads)
}

/// Mean of `exp(-t^2 / s^2)` over `t` in `[offset - a/2, offset + a/2]`.
fn pixel_average(offset: f64, a: f64, s: f64) -> f64 {
    let lo = (offset - 0.5 * a) / s;
    let hi = (offset + 0.5 * a) / s;
    // erf differences lose precision in the tails; use erfc on the far side.
    let diff = if lo > 0.0 {
        erfc(lo) - erfc(hi)
    } else if hi < 0.0 {
        erfc(-hi) - erfc(-lo)
    } else {
        erf(hi) - erf(lo)
    };
    0.5 * std::f64::consts::PI.sqrt() * s / a * diff
}

/// Rows and columns of the grid a bead can reach, with its per-axis
/// Gaussian factors.
pub(crate) struct BeadWindow {
    pub r0: usize,
    pub c0: usize,
    /// `x_c - x_j` for each column in the window.
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// `exp(-dx^2 / S^2)`.
    pub ex: Vec<f64>,
    pub ey: Vec<f64>,
}

fn axis_range(center: f64, reach: f64, a: f64, n: usize) -> Option<(usize, usize)> {
    let lo = ((center - reach) / a - 0.5).ceil().max(0.0);
    let hi = ((center + reach) / a - 0.5).floor().min(n as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize + 1))
}

pub(crate) fn bead_window(bead: &BeadParams, s: f64, grid: &Grid) -> Option<BeadWindow> {
    let reach = s * WINDOW_EXPONENT.sqrt();
    let a = grid.pixel_size;
    let (c0, c1) = axis_range(bead.x, reach, a, grid.cols)?;
    let (r0, r1) = axis_range(bead.y, reach, a, grid.rows)?;
    let s2 = s * s;
    let dx: Vec<f64> = (c0..c1).map(|c| grid.col_center(c) - bead.x).collect();
    let dy: Vec<f64> = (r0..r1).map(|r| grid.row_center(r) - bead.y).collect();
    let ex = dx.iter().map(|d| (-d * d / s2).exp()).collect();
    let ey = dy.iter().map(|d| (-d * d / s2).exp()).collect();
    Some(BeadWindow {
        r0,
        c0,
        dx,
        dy,
        ex,
        ey,
    })
}

/// Expected counts `f_i` for every pixel of `grid` (midpoint form).
pub fn render(params: &ModelParams, grid: &Grid) -> Vec<f64> {
    let mut f = vec![params.background; grid.len()];
    for bead in &params.beads {
        let Some(w) = bead_window(bead, params.psf_width, grid) else {
            continue;
        };
        for (ry, &ey) in w.ey.iter().enumerate() {
            let row = (w.r0 + ry) * grid.cols + w.c0;
            let amp_y = bead.amplitude * ey;
            for (cx, &ex) in w.ex.iter().enumerate() {
                f[row + cx] += amp_y * ex;
            }
        }
    }
    f
}

/// Expected counts for every pixel using the exact pixel integral.
pub fn render_exact(params: &ModelParams, grid: &Grid) -> Vec<f64> {
    (0..grid.len())
        .map(|i| intensity_exact(params, grid, i).expect("index in range"))
        .collect()
}

fn check_variance(f: &[f64], theta: f64) -> Result<()> {
    for (i, &fi) in f.iter().enumerate() {
        let v = fi + theta;
        if !(v > 0.0) {
            return Err(Error::NonPositiveVariance { pixel: i, value: v });
        }
    }
    Ok(())
}

/// The approximate log-likelihood `l_n`; larger is better.
pub fn log_likelihood(params: &ModelParams, frame: &ImageFrame) -> Result<f64> {
    let f = render(params, frame.grid());
    log_likelihood_from_mean(&f, params.instrument_var, frame.counts())
}

pub(crate) fn log_likelihood_from_mean(f: &[f64], theta: f64, z: &[f64]) -> Result<f64> {
    check_variance(f, theta)?;
    Ok(f.iter()
        .zip(z)
        .map(|(&fi, &zi)| {
            let v = fi + theta;
            let r = zi - fi;
            -v.ln() - r * r / v
        })
        .sum())
}

/// `l_n` and its gradient in the layout `ParamLayout::new(k, true)`.
pub fn log_likelihood_gradient(params: &ModelParams, frame: &ImageFrame) -> Result<(f64, Vec<f64>)> {
    let grid = frame.grid();
    let layout = ParamLayout::new(params.bead_count(), true);
    let theta = params.instrument_var;
    let f = render(params, grid);
    check_variance(&f, theta)?;

    // dl/df_i, accounting for f_i in both the mean and the variance.
    let mut weight = Vec::with_capacity(f.len());
    let mut value = 0.0;
    let mut d_theta = 0.0;
    for (&fi, &zi) in f.iter().zip(frame.counts()) {
        let v = fi + theta;
        let r = zi - fi;
        let rv = r / v;
        value += -v.ln() - r * rv;
        weight.push(-1.0 / v + 2.0 * rv + rv * rv);
        d_theta += -1.0 / v + rv * rv;
    }

    let mut grad = vec![0.0; layout.len()];
    let s = params.psf_width;
    let s2 = s * s;
    let mut d_s = 0.0;
    for (j, bead) in params.beads.iter().enumerate() {
        let Some(w) = bead_window(bead, s, grid) else {
            continue;
        };
        let (mut gx, mut gy, mut ga, mut gs) = (0.0, 0.0, 0.0, 0.0);
        for (ry, (&ey, &dy)) in w.ey.iter().zip(&w.dy).enumerate() {
            let row = (w.r0 + ry) * grid.cols + w.c0;
            for (cx, (&ex, &dx)) in w.ex.iter().zip(&w.dx).enumerate() {
                let g = ex * ey;
                let wg = weight[row + cx] * g;
                ga += wg;
                gx += wg * dx;
                gy += wg * dy;
                gs += wg * (dx * dx + dy * dy);
            }
        }
        let amp = bead.amplitude;
        grad[3 * j] = 2.0 * amp * gx / s2;
        grad[3 * j + 1] = 2.0 * amp * gy / s2;
        grad[3 * j + 2] = ga;
        d_s += 2.0 * amp * gs / (s2 * s);
    }
    if let Some(i) = layout.psf_index() {
        grad[i] = d_s;
    }
    grad[layout.background_index()] = weight.iter().sum();
    grad[layout.theta_index().expect("layout has theta")] = d_theta;
    Ok((value, grad))
}

/// Expected counts and the Jacobian `df_i / d(param)` for the parameters of
/// `layout` (which must not include theta; `df/dtheta = 0`).
pub(crate) fn mean_jacobian(
    params: &ModelParams,
    grid: &Grid,
    layout: ParamLayout,
) -> (Vec<f64>, DMatrix<f64>) {
    debug_assert!(!layout.with_theta);
    let f = render(params, grid);
    let mut jac = DMatrix::zeros(grid.len(), layout.len());
    let s = params.psf_width;
    let s2 = s * s;
    let psf_col = layout.psf_index();
    for (j, bead) in params.beads.iter().enumerate() {
        let Some(w) = bead_window(bead, s, grid) else {
            continue;
        };
        let amp = bead.amplitude;
        for (ry, (&ey, &dy)) in w.ey.iter().zip(&w.dy).enumerate() {
            let row = (w.r0 + ry) * grid.cols + w.c0;
            for (cx, (&ex, &dx)) in w.ex.iter().zip(&w.dx).enumerate() {
                let i = row + cx;
                let g = ex * ey;
                let ag = amp * g;
                jac[(i, 3 * j)] = 2.0 * ag * dx / s2;
                jac[(i, 3 * j + 1)] = 2.0 * ag * dy / s2;
                jac[(i, 3 * j + 2)] = g;
                if let Some(c) = psf_col {
                    jac[(i, c)] += 2.0 * ag * (dx * dx + dy * dy) / (s2 * s);
                }
            }
        }
    }
    jac.column_mut(layout.background_index()).fill(1.0);
    (f, jac)
}

/// Sum of squared differences between counts and the midpoint surface.
pub fn residual_sum_squares(params: &ModelParams, frame: &ImageFrame) -> f64 {
    render(params, frame.grid())
        .iter()
        .zip(frame.counts())
        .map(|(f, z)| (z - f) * (z - f))
        .sum()
}

/// Per-pixel standardized residuals `(z_i - f_i) / sqrt(f_i + theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualField {
    grid: Grid,
    values: Vec<f64>,
}

impl ResidualField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::InvalidFrame(format!(
                "expected {} residuals, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame("residuals must be finite".into()));
        }
        Ok(ResidualField { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample variance (n - 1 denominator); zero for a single value.
    pub fn variance(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
    }
}

pub fn standardized_residuals(params: &ModelParams, frame: &ImageFrame) -> Result<ResidualField> {
    let f = render(params, frame.grid());
    let theta = params.instrument_var;
    check_variance(&f, theta)?;
    let values = f
        .iter()
        .zip(frame.counts())
        .map(|(&fi, &zi)| (zi - fi) / (fi + theta).sqrt())
        .collect();
    ResidualField::new(*frame.grid(), values)
}
