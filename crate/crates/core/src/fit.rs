//! Least-squares and approximate maximum-likelihood fitting of `k`-bead
//! models, plus the observed information at an estimate.
//!
//! Both optimizers work on `ln S` (and `ln theta` for the likelihood) so the
//! scale parameters stay positive; amplitudes and background are left
//! untransformed and flagged if they end up negative. Standard errors are
//! always computed in the original parameterization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::infer::invert_information;
use crate::model::{log_likelihood_gradient, mean_jacobian, render};
use crate::optim::{bfgs, levenberg_marquardt};
use crate::params::{ModelParams, Param, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitKind {
    /// Minimizes the residual sum of squares over `(x_j, y_j, A_j, S, B)`.
    Ols,
    /// Maximizes the approximate log-likelihood over all parameters.
    Mle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: FitKind,
    pub params: ModelParams,
    /// RSS for least squares, `l_n` for maximum likelihood.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Some amplitude or the background is negative at the reported optimum.
    pub bound_violation: bool,
    /// Objective at the start point and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Observed information (negative Hessian of the Gaussian
    /// log-likelihood, `-0.5 * d^2 l_n`) in the layout of [`FitResult::layout`].
    pub info_matrix: Option<DMatrix<f64>>,
    pub covariance: Option<DMatrix<f64>>,
    pub std_errors: Option<Vec<f64>>,
    /// Why the information-based quantities are missing, if they are.
    pub information_error: Option<String>,
}

impl FitResult {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.params.bead_count(), self.kind == FitKind::Mle)
    }

    pub fn std_error(&self, param: Param) -> Option<f64> {
        let i = self.layout().index_of(param)?;
        self.std_errors.as_ref().map(|se| se[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Compute the observed information, covariance and standard errors.
    pub information: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 500,
            information: true,
        }
    }
}

fn check_init(k: usize, init: &ModelParams) -> Result<()> {
    if init.bead_count() != k {
        return Err(Error::InvalidParams(format!(
            "initial parameters have {} beads, expected {k}",
            init.bead_count()
        )));
    }
    // Start points may come from an earlier fit whose amplitudes or
    // background went negative, so only finiteness and the scale
    // parameters are checked here.
    let finite = init.background.is_finite()
        && init.instrument_var.is_finite()
        && init.beads.iter().all(|b| b.x.is_finite() && b.y.is_finite() && b.amplitude.is_finite());
    if !finite {
        return Err(Error::InvalidParams("initial parameters must be finite".into()));
    }
    if !(init.psf_width.is_finite() && init.psf_width > 0.0) {
        return Err(Error::InvalidParams(format!(
            "psf_width must be positive, got {}",
            init.psf_width
        )));
    }
    if init.instrument_var < 0.0 {
        return Err(Error::InvalidParams(format!(
            "instrument_var must be nonnegative, got {}",
            init.instrument_var
        )));
    }
    Ok(())
}

fn has_bound_violation(p: &ModelParams) -> bool {
    p.background < 0.0 || p.beads.iter().any(|b| b.amplitude < 0.0)
}

/// Least-squares fit of a `k`-bead surface. `theta` is carried over from
/// `init` unchanged.
pub fn fit_ols(frame: &ImageFrame, k: usize, init: &ModelParams) -> Result<FitResult> {
    fit_ols_with(frame, k, init, &FitOptions::default())
}

pub fn fit_ols_with(
    frame: &ImageFrame,
    k: usize,
    init: &ModelParams,
    options: &FitOptions,
) -> Result<FitResult> {
    check_init(k, init)?;
    let z = frame.counts();

    if k == 0 {
        let mean = frame.mean();
        let rss = z.iter().map(|v| (v - mean) * (v - mean)).sum();
        let params = ModelParams {
            background: mean,
            ..init.clone()
        };
        return Ok(FitResult {
            kind: FitKind::Ols,
            bound_violation: has_bound_violation(&params),
            params,
            objective: rss,
            converged: true,
            iterations: 0,
            objective_trace: vec![rss],
            info_matrix: None,
            covariance: None,
            std_errors: None,
            information_error: None,
        });
    }

    let layout = ParamLayout::new(k, false);
    let s_idx = layout.psf_index().expect("k > 0");
    let to_params = |x: &[f64]| {
        let mut v = x.to_vec();
        v[s_idx] = x[s_idx].exp();
        layout.unpack(&v, init)
    };
    let eval = |x: &[f64]| {
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let p = to_params(x);
        if !(p.psf_width > 0.0 && p.psf_width.is_finite()) {
            return None;
        }
        let (f, mut jac) = mean_jacobian(&p, frame.grid(), layout);
        let r = DVector::from_iterator(f.len(), z.iter().zip(&f).map(|(zi, fi)| zi - fi));
        // residual = z - f; d(residual)/d(ln S) = -S * df/dS
        jac.column_mut(s_idx).scale_mut(p.psf_width);
        jac.neg_mut();
        Some((r, jac))
    };
    let mut x0 = layout.pack(init);
    x0[s_idx] = x0[s_idx].ln();
    let out = levenberg_marquardt(eval, x0, options.max_iterations)
        .ok_or_else(|| Error::Domain("least-squares start point is not finite".into()))?;
    let params = to_params(&out.x);
    Ok(FitResult {
        kind: FitKind::Ols,
        bound_violation: has_bound_violation(&params),
        params,
        objective: out.value,
        converged: out.converged,
        iterations: out.iterations,
        objective_trace: out.history,
        info_matrix: None,
        covariance: None,
        std_errors: None,
        information_error: None,
    })
}

/// Method-of-moments start for `theta` from a least-squares fit, using
/// `Var(Z_i) = f_i + theta`; floored at 1.
pub fn initial_instrument_var(frame: &ImageFrame, fitted: &ModelParams) -> f64 {
    let f = render(fitted, frame.grid());
    let n = f.len() as f64;
    let resid: Vec<f64> = frame.counts().iter().zip(&f).map(|(z, fi)| z - fi).collect();
    let mean_r = resid.iter().sum::<f64>() / n;
    let var_r = resid.iter().map(|r| (r - mean_r) * (r - mean_r)).sum::<f64>() / n;
    let mean_f = f.iter().sum::<f64>() / n;
    (var_r - mean_f).max(1.0)
}

/// Maps between model parameters and the optimizer's coordinates, where
/// `S` and `theta` enter through their logarithms.
struct MleCoordinates<'a> {
    layout: ParamLayout,
    template: &'a ModelParams,
}

impl MleCoordinates<'_> {
    fn log_indices(&self) -> impl Iterator<Item = usize> {
        self.layout
            .psf_index()
            .into_iter()
            .chain(self.layout.theta_index())
    }

    fn to_internal(&self, p: &ModelParams) -> Vec<f64> {
        let mut v = self.layout.pack(p);
        for i in self.log_indices() {
            v[i] = v[i].ln();
        }
        v
    }

    fn to_params(&self, x: &[f64]) -> ModelParams {
        let mut v = x.to_vec();
        for i in self.log_indices() {
            v[i] = v[i].exp();
        }
        self.layout.unpack(&v, self.template)
    }
}

/// Expected information of `l_n` at `p` (twice the Fisher information of
/// the Gaussian model), in the full likelihood layout.
fn expected_information(frame: &ImageFrame, p: &ModelParams) -> DMatrix<f64> {
    let k = p.bead_count();
    let mean_layout = ParamLayout::new(k, false);
    let (f, jac) = mean_jacobian(p, frame.grid(), mean_layout);
    let q = mean_layout.len();
    let theta = p.instrument_var;
    let mut weighted = jac.clone();
    let mut w_theta = DVector::zeros(q);
    let mut theta_theta = 0.0;
    for (i, &fi) in f.iter().enumerate() {
        let v = (fi + theta).max(f64::MIN_POSITIVE);
        let w = 2.0 / v + 1.0 / (v * v);
        weighted.row_mut(i).scale_mut(w);
        for c in 0..q {
            w_theta[c] += jac[(i, c)] / (v * v);
        }
        theta_theta += 1.0 / (v * v);
    }
    let block = jac.tr_mul(&weighted);
    let mut info = DMatrix::zeros(q + 1, q + 1);
    info.view_mut((0, 0), (q, q)).copy_from(&block);
    for c in 0..q {
        info[(c, q)] = w_theta[c];
        info[(q, c)] = w_theta[c];
    }
    info[(q, q)] = theta_theta;
    info
}

/// Inverse of the expected information in the optimizer's coordinates.
fn internal_metric(frame: &ImageFrame, coords: &MleCoordinates<'_>, x: &[f64]) -> DMatrix<f64> {
    let p = coords.to_params(x);
    let mut info = expected_information(frame, &p);
    let v = coords.layout.pack(&p);
    for i in coords.log_indices() {
        info.row_mut(i).scale_mut(v[i]);
        info.column_mut(i).scale_mut(v[i]);
    }
    let n = info.nrows();
    let mut ridge = 0.0;
    let scale = (0..n).map(|i| info[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    loop {
        let mut m = info.clone();
        for i in 0..n {
            m[(i, i)] += ridge + 1e-12 * info[(i, i)].abs();
        }
        if let Some(ch) = m.cholesky() {
            return ch.inverse();
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 100.0 };
    }
}

/// Approximate maximum-likelihood fit of a `k`-bead model. `init` must carry
/// a positive `theta`.
pub fn fit_mle(frame: &ImageFrame, k: usize, init: &ModelParams) -> Result<FitResult> {
    fit_mle_with(frame, k, init, &FitOptions::default())
}

pub fn fit_mle_with(
    frame: &ImageFrame,
    k: usize,
    init: &ModelParams,
    options: &FitOptions,
) -> Result<FitResult> {
    check_init(k, init)?;
    if !(init.instrument_var > 0.0) {
        return Err(Error::InvalidParams(
            "maximum-likelihood start needs a positive instrument_var".into(),
        ));
    }
    let coords = MleCoordinates {
        layout: ParamLayout::new(k, true),
        template: init,
    };
    let eval = |x: &[f64]| {
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let p = coords.to_params(x);
        if !(p.psf_width > 0.0 && p.psf_width.is_finite() && p.instrument_var.is_finite()) {
            return None;
        }
        let (ll, mut grad) = log_likelihood_gradient(&p, frame).ok()?;
        let v = coords.layout.pack(&p);
        for i in coords.log_indices() {
            grad[i] *= v[i];
        }
        Some((-ll, grad.into_iter().map(|g| -g).collect()))
    };
    let metric = |x: &[f64]| internal_metric(frame, &coords, x);
    let out = bfgs(eval, metric, coords.to_internal(init), options.max_iterations).ok_or_else(|| {
        Error::Domain("likelihood is undefined at the start point (f + theta <= 0)".into())
    })?;

    let params = coords.to_params(&out.x);
    let mut fit = FitResult {
        kind: FitKind::Mle,
        bound_violation: has_bound_violation(&params),
        params,
        objective: -out.value,
        converged: out.converged,
        iterations: out.iterations,
        objective_trace: out.history.iter().map(|v| -v).collect(),
        info_matrix: None,
        covariance: None,
        std_errors: None,
        information_error: None,
    };
    if options.information {
        attach_information(frame, &mut fit);
    }
    Ok(fit)
}

/// Fills the information matrix, covariance and standard errors of an
/// maximum-likelihood fit, or records why they are unavailable.
pub fn attach_information(frame: &ImageFrame, fit: &mut FitResult) {
    match observed_information(frame, &fit.params) {
        Ok(info) => {
            match invert_information(&info) {
                Ok(cov) => {
                    fit.std_errors = Some(cov.diagonal().iter().map(|v| v.sqrt()).collect());
                    fit.covariance = Some(cov);
                    fit.information_error = None;
                }
                Err(e) => {
                    fit.std_errors = None;
                    fit.covariance = None;
                    fit.information_error = Some(format!("singular information: {e}"));
                }
            }
            fit.info_matrix = Some(info);
        }
        Err(e) => {
            fit.info_matrix = None;
            fit.covariance = None;
            fit.std_errors = None;
            fit.information_error = Some(e.to_string());
        }
    }
}

/// Hessian of `l_n` by central differences of its analytic gradient, with
/// steps `h_k = sqrt(eps) * max(|beta_k|, 1)`, symmetrized.
pub fn log_likelihood_hessian(frame: &ImageFrame, at: &ModelParams) -> Result<DMatrix<f64>> {
    let layout = ParamLayout::new(at.bead_count(), true);
    let beta = layout.pack(at);
    let params = layout.params();
    let p = beta.len();
    let mut hess = DMatrix::zeros(p, p);
    for k in 0..p {
        let h = f64::EPSILON.sqrt() * beta[k].abs().max(1.0);
        let lower = beta[k] - h;
        let crosses = match params[k] {
            Param::PsfWidth => lower <= 0.0,
            Param::Amplitude(_) | Param::Background | Param::InstrumentVar => lower < 0.0,
            Param::X(_) | Param::Y(_) => false,
        };
        if crosses {
            return Err(Error::StepAtBoundary {
                param: params[k].to_string(),
            });
        }
        let mut up = beta.clone();
        up[k] += h;
        let mut dn = beta.clone();
        dn[k] = lower;
        let boundary = |e: Error| match e {
            Error::NonPositiveVariance { .. } => Error::StepAtBoundary {
                param: params[k].to_string(),
            },
            other => other,
        };
        let (_, gu) = log_likelihood_gradient(&layout.unpack(&up, at), frame).map_err(boundary)?;
        let (_, gd) = log_likelihood_gradient(&layout.unpack(&dn, at), frame).map_err(boundary)?;
        let step = up[k] - dn[k];
        for r in 0..p {
            hess[(r, k)] = (gu[r] - gd[r]) / step;
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Observed information `-0.5 * d^2 l_n` at `at`. The factor 1/2 makes it the
/// information of the Gaussian log-likelihood (`l_n` is twice that
/// log-likelihood), whose inverse estimates the covariance of the estimates.
pub fn observed_information(frame: &ImageFrame, at: &ModelParams) -> Result<DMatrix<f64>> {
    Ok(log_likelihood_hessian(frame, at)? * -0.5)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::frame::Grid;
    use crate::model::{log_likelihood, residual_sum_squares};
    use crate::params::BeadParams;

    fn small_truth() -> ModelParams {
        ModelParams::new(vec![BeadParams::new(1030.0, 980.0, 15000.0)], 200.0, 200.0, 100.0)
    }

    #[test]
    fn zero_bead_ols_is_the_mean() {
        let frame = ImageFrame::new(2, 3, 100.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let init = ModelParams::new(vec![], 200.0, 0.0, 10.0);
        let fit = fit_ols(&frame, 0, &init).unwrap();
        assert_relative_eq!(fit.params.background, 4.0, max_relative = 1e-15);
        let expected: f64 = [9.0, 4.0, 1.0, 0.0, 1.0, 25.0].iter().sum();
        assert_relative_eq!(fit.objective, expected, max_relative = 1e-14);
        assert!(fit.converged);
        assert_eq!(fit.params.instrument_var, 10.0);
    }

    #[test]
    fn ols_recovers_noiseless_truth() {
        let grid = Grid::new(20, 20, 100.0).unwrap();
        let truth = small_truth();
        let frame = ImageFrame::from_grid(grid, render(&truth, &grid)).unwrap();
        let mut init = truth.clone();
        init.beads[0].x += 20.0;
        init.beads[0].y -= 20.0;
        let fit = fit_ols(&frame, 1, &init).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!(fit.objective < 1e-6, "rss {}", fit.objective);
        assert!((fit.params.beads[0].x - truth.beads[0].x).abs() < 0.01);
        assert!((fit.params.beads[0].y - truth.beads[0].y).abs() < 0.01);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(!fit.bound_violation);
    }

    #[test]
    fn rejects_mismatched_bead_count() {
        let frame = ImageFrame::new(3, 3, 100.0, vec![1.0; 9]).unwrap();
        assert!(fit_ols(&frame, 2, &small_truth()).is_err());
        assert!(fit_mle(&frame, 0, &small_truth()).is_err());
    }

    #[test]
    fn mle_requires_positive_theta() {
        let frame = ImageFrame::new(3, 3, 100.0, vec![200.0; 9]).unwrap();
        let init = ModelParams::new(vec![], 200.0, 200.0, 0.0);
        assert!(fit_mle(&frame, 0, &init).is_err());
    }

    #[test]
    fn one_dimensional_curvature_matches_hand_derivative() {
        // Single pixel, B free: l(B) = -ln(B + t) - (z - B)^2 / (B + t).
        // d2l/dB2 = 1/v^2 - 2/v - 4r/v^2 - 2r^2/v^3 with v = B + t, r = z - B.
        let (z, b, t) = (210.0f64, 200.0f64, 100.0f64);
        let frame = ImageFrame::new(1, 1, 100.0, vec![z]).unwrap();
        let at = ModelParams::new(vec![], 200.0, b, t);
        let hess = log_likelihood_hessian(&frame, &at).unwrap();
        let (v, r) = (b + t, z - b);
        let d2 = 1.0 / (v * v) - 2.0 / v - 4.0 * r / (v * v) - 2.0 * r * r / (v * v * v);
        assert!((hess[(0, 0)] - d2).abs() < 1e-4 * d2.abs(), "{} vs {d2}", hess[(0, 0)]);
        let info = observed_information(&frame, &at).unwrap();
        assert_relative_eq!(info[(0, 0)], -0.5 * hess[(0, 0)], max_relative = 1e-15);
    }

    #[test]
    fn hessian_step_at_boundary_is_an_error() {
        let frame = ImageFrame::new(2, 2, 100.0, vec![200.0; 4]).unwrap();
        let at = ModelParams::new(vec![BeadParams::new(100.0, 100.0, 0.0)], 200.0, 200.0, 100.0);
        match log_likelihood_hessian(&frame, &at) {
            Err(Error::StepAtBoundary { param }) => assert_eq!(param, "A0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mle_on_small_frame_increases_likelihood() {
        let grid = Grid::new(20, 20, 100.0).unwrap();
        let truth = small_truth();
        let design = crate::simulate::SimulationDesign {
            truth: truth.clone(),
            grid,
            noise: crate::simulate::NoiseSpec::new(crate::simulate::NoiseLaw::Gaussian, 100.0).unwrap(),
            intensity_mode: crate::simulate::IntensityMode::Midpoint,
            seed: 3,
        };
        let frame = crate::simulate::simulate_frame(&design).unwrap();
        let ols = fit_ols(&frame, 1, &truth).unwrap();
        assert!(ols.objective <= residual_sum_squares(&truth, &frame));
        let mut init = ols.params.clone();
        init.instrument_var = initial_instrument_var(&frame, &ols.params);
        let fit = fit_mle(&frame, 1, &init).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!(fit.objective >= log_likelihood(&truth, &frame).unwrap());
        assert!(fit.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        let se = fit.std_errors.as_ref().unwrap();
        assert_eq!(se.len(), 6);
        assert!(se.iter().all(|s| s.is_finite() && *s > 0.0));
    }
}
