//! Small dense optimizers used by the fitting routines.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after the start point and after every accepted step.
    pub history: Vec<f64>,
}

const REL_TOL: f64 = 1e-10;

/// Levenberg–Marquardt on `0.5 * |r(x)|^2`. `eval` returns the residual
/// vector and its Jacobian `dr/dx`, or `None` outside the feasible region.
pub(crate) fn levenberg_marquardt<F>(mut eval: F, x0: Vec<f64>, max_iter: usize) -> Option<Outcome>
where
    F: FnMut(&[f64]) -> Option<(DVector<f64>, DMatrix<f64>)>,
{
    let (mut r, mut jac) = eval(&x0)?;
    let mut x = DVector::from_vec(x0);
    let mut rss = r.norm_squared();
    let mut history = vec![rss];
    let mut lambda = 1e-3;
    let p = x.len();

    for iter in 1..=max_iter {
        if rss == 0.0 {
            return Some(finish(x, rss, iter - 1, true, history));
        }
        let jtj = jac.tr_mul(&jac);
        let grad = jac.tr_mul(&r);
        let max_diag = (0..p).map(|k| jtj[(k, k)]).fold(0.0, f64::max);
        let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
        let damping: Vec<f64> = (0..p).map(|k| jtj[(k, k)].max(floor)).collect();

        loop {
            let mut lhs = jtj.clone();
            for (k, d) in damping.iter().enumerate() {
                lhs[(k, k)] += lambda * d;
            }
            let step = match lhs.cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        return Some(finish(x, rss, iter, false, history));
                    }
                    continue;
                }
            };
            let trial = &x + &step;
            let accepted = eval(trial.as_slice()).and_then(|(rn, jn)| {
                let rss_new = rn.norm_squared();
                (rss_new.is_finite() && rss_new < rss).then_some((rn, jn, rss_new))
            });
            match accepted {
                Some((rn, jn, rss_new)) => {
                    let rel = (rss - rss_new) / rss;
                    x = trial;
                    r = rn;
                    jac = jn;
                    rss = rss_new;
                    history.push(rss);
                    lambda = (lambda / 3.0).max(1e-12);
                    if rel < REL_TOL {
                        return Some(finish(x, rss, iter, true, history));
                    }
                    break;
                }
                None => {
                    lambda *= 4.0;
                    if lambda > 1e16 {
                        // No decrease is possible from here: accept as a
                        // minimum if the Gauss-Newton decrease is negligible
                        // relative to the current or the starting RSS.
                        let floor = 1e-8 * rss + f64::EPSILON * history[0];
                        let converged = jtj
                            .clone()
                            .cholesky()
                            .map(|ch| grad.dot(&ch.solve(&grad)) <= floor)
                            .unwrap_or(false);
                        return Some(finish(x, rss, iter, converged, history));
                    }
                }
            }
        }
    }
    Some(finish(x, rss, max_iter, false, history))
}

fn finish(x: DVector<f64>, value: f64, iterations: usize, converged: bool, history: Vec<f64>) -> Outcome {
    Outcome {
        x: x.as_slice().to_vec(),
        value,
        iterations,
        converged,
        history,
    }
}

/// BFGS minimization with an Armijo backtracking line search.
///
/// `eval` returns the objective and gradient or `None` if infeasible.
/// `metric` supplies an initial inverse-Hessian approximation at a point; it
/// seeds the iteration and is used again to restart after a failed search.
/// Converges when the quasi-Newton decrement `g' H g` drops below `1e-9`, or
/// when the relative objective change is below `1e-10` with a small decrement.
pub(crate) fn bfgs<F, M>(mut eval: F, mut metric: M, x0: Vec<f64>, max_iter: usize) -> Option<Outcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    M: FnMut(&[f64]) -> DMatrix<f64>,
{
    const DECREMENT_TOL: f64 = 1e-9;
    const STALL_DECREMENT: f64 = 1e-5;
    const ARMIJO: f64 = 1e-4;

    let (mut fx, g0) = eval(&x0)?;
    let mut g = DVector::from_vec(g0);
    let mut h = metric(&x0);
    let mut x = DVector::from_vec(x0);
    let mut history = vec![fx];
    let mut restarted = false;

    for iter in 1..=max_iter {
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = metric(x.as_slice());
            dir = -(&h * &g);
            slope = g.dot(&dir);
            if !(slope < 0.0) {
                return Some(finish(x, fx, iter, false, history));
            }
        }
        let decrement = -slope;
        if decrement < DECREMENT_TOL {
            return Some(finish(x, fx, iter - 1, true, history));
        }

        let mut t = 1.0;
        let mut found = None;
        for _ in 0..60 {
            let trial = &x + t * &dir;
            if let Some((ft, gt)) = eval(trial.as_slice()) {
                if ft.is_finite() && ft <= fx + ARMIJO * t * slope {
                    found = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
                // Quadratic interpolation of the step, kept in [0.1 t, 0.5 t].
                if ft.is_finite() {
                    let denom = 2.0 * (ft - fx - slope * t);
                    let t_q = if denom > 0.0 { -slope * t * t / denom } else { 0.5 * t };
                    t = t_q.clamp(0.1 * t, 0.5 * t);
                    continue;
                }
            }
            t *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = found else {
            if decrement < STALL_DECREMENT {
                return Some(finish(x, fx, iter, true, history));
            }
            if restarted {
                return Some(finish(x, fx, iter, false, history));
            }
            restarted = true;
            h = metric(x.as_slice());
            continue;
        };
        restarted = false;

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            h += (rho * rho * yhy + rho) * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }

        let rel = (fx - f_new) / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        if rel < REL_TOL {
            let dec = g.dot(&(&h * &g));
            if dec < STALL_DECREMENT {
                return Some(finish(x, fx, iter, true, history));
            }
        }
    }
    Some(finish(x, fx, max_iter, false, history))
}
