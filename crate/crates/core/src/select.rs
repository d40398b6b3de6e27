//! Choosing the number of beads: a forward least-squares sweep scored by an
//! information criterion, then a backward sweep of maximum-likelihood fits
//! compared by likelihood-ratio tests.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fit::{attach_information, fit_mle_with, fit_ols_with, initial_instrument_var, FitOptions, FitResult};
use crate::frame::ImageFrame;
use crate::model::render;
use crate::params::{BeadParams, ModelParams};

/// Complexity penalty per free parameter in the forward criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcVariant {
    /// `p * sqrt(n)`.
    #[default]
    SqrtN,
    /// `p * ln(n)`.
    Bic,
}

impl FromStr for IcVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_n" => Ok(IcVariant::SqrtN),
            "bic" => Ok(IcVariant::Bic),
            other => Err(Error::Unknown {
                kind: "information criterion",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for IcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IcVariant::SqrtN => "sqrt_n",
            IcVariant::Bic => "bic",
        })
    }
}

/// 95th percentile of chi-square with 3 degrees of freedom, to two decimals.
pub const DEFAULT_LRT_THRESHOLD: f64 = 7.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub max_beads: usize,
    pub lrt_threshold: f64,
    pub ic: IcVariant,
    /// Iteration cap for every fit in both sweeps. Fits of spurious beads
    /// can crawl for hundreds of iterations without changing the decision.
    pub max_iterations: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            max_beads: 30,
            lrt_threshold: DEFAULT_LRT_THRESHOLD,
            ic: IcVariant::SqrtN,
            max_iterations: 100,
        }
    }
}

/// `n ln(RSS / n) + p sqrt(n)`.
pub fn information_criterion(rss: f64, n: usize, p: usize) -> Result<f64> {
    information_criterion_with(IcVariant::SqrtN, rss, n, p)
}

pub fn information_criterion_with(variant: IcVariant, rss: f64, n: usize, p: usize) -> Result<f64> {
    if !(rss > 0.0) || !rss.is_finite() {
        return Err(Error::Domain(format!(
            "information criterion needs a positive finite RSS, got {rss}"
        )));
    }
    if n == 0 {
        return Err(Error::Domain("information criterion needs n >= 1".into()));
    }
    let nf = n as f64;
    let penalty = match variant {
        IcVariant::SqrtN => nf.sqrt(),
        IcVariant::Bic => nf.ln(),
    };
    Ok(nf * (rss / nf).ln() + p as f64 * penalty)
}

/// Free parameters of a `k`-bead least-squares fit: `(x, y, A)` per bead,
/// plus `S` and `B`.
pub fn free_param_count(k: usize) -> usize {
    3 * k + 2
}

/// `-2 (ll_k - ll_k_plus_1)` for log-likelihoods of nested models.
pub fn likelihood_ratio(ll_k: f64, ll_k_plus_1: f64) -> f64 {
    -2.0 * (ll_k - ll_k_plus_1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardStep {
    pub k: usize,
    pub rss: f64,
    pub p: usize,
    pub ic: f64,
    pub converged: bool,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardDecision {
    /// The model the backward sweep starts from.
    Start,
    /// `G^2` at or below the threshold: the extra bead is dropped.
    RemoveBead,
    /// `G^2` above the threshold: the larger model is kept.
    KeepBead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardStep {
    pub k: usize,
    /// `l_n` of the `k`-bead maximum-likelihood fit.
    pub log_likelihood: f64,
    /// Likelihood-ratio statistic of this model against the `k + 1` model.
    pub g2: Option<f64>,
    pub decision: BackwardDecision,
    pub converged: bool,
    /// Start point of this fit.
    pub init: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub forward: Vec<ForwardStep>,
    pub backward: Vec<BackwardStep>,
    pub selected_k: usize,
    /// The forward sweep hit `max_beads` while the criterion was still falling.
    pub truncated: bool,
}

/// Start point for a `k + 1` bead fit: the `k` bead estimate plus a bead at
/// the pixel with the largest positive residual.
fn add_bead(frame: &ImageFrame, current: &ModelParams) -> Option<ModelParams> {
    let f = render(current, frame.grid());
    let (idx, peak) = frame
        .counts()
        .iter()
        .zip(&f)
        .map(|(z, fi)| z - fi)
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if !(peak > 0.0) {
        return None;
    }
    let (x, y) = frame.grid().center(idx);
    let mut next = current.clone();
    if next.beads.is_empty() {
        next.psf_width = 2.0 * frame.pixel_size();
        next.background = frame.median();
    }
    next.beads.push(BeadParams::new(x, y, peak));
    Some(next)
}

fn forward_step(k: usize, fit: &FitResult, n: usize, ic: IcVariant) -> Result<ForwardStep> {
    let p = free_param_count(k);
    Ok(ForwardStep {
        k,
        rss: fit.objective,
        p,
        ic: information_criterion_with(ic, fit.objective, n, p)?,
        converged: fit.converged,
        params: fit.params.clone(),
    })
}

/// Runs both sweeps and returns the maximum-likelihood fit of the selected
/// model, with observed information attached, and the full trace.
pub fn locate_beads(frame: &ImageFrame, config: &SelectConfig) -> Result<(FitResult, SelectionTrace)> {
    if !(config.lrt_threshold > 0.0) {
        return Err(Error::Config("lrt_threshold must be positive".into()));
    }
    if config.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be positive".into()));
    }
    let sweep = FitOptions {
        max_iterations: config.max_iterations,
        information: false,
    };
    let n = frame.len();
    let start = ModelParams::new(vec![], 2.0 * frame.pixel_size(), frame.median(), 0.0);
    let mut best = fit_ols_with(frame, 0, &start, &sweep)?;
    let mut forward = vec![forward_step(0, &best, n, config.ic)?];
    let mut truncated = false;

    loop {
        let k = best.params.bead_count();
        if k >= config.max_beads {
            truncated = true;
            break;
        }
        let Some(init) = add_bead(frame, &best.params) else {
            break;
        };
        let fit = fit_ols_with(frame, k + 1, &init, &sweep)?;
        let step = forward_step(k + 1, &fit, n, config.ic)?;
        let rises = step.ic > forward.last().expect("nonempty").ic;
        forward.push(step);
        if rises {
            break;
        }
        best = fit;
    }

    let mut init = best.params.clone();
    init.instrument_var = initial_instrument_var(frame, &best.params);
    let mut larger = fit_mle_with(frame, init.bead_count(), &init, &sweep)?;
    let mut backward = vec![BackwardStep {
        k: init.bead_count(),
        log_likelihood: larger.objective,
        g2: None,
        decision: BackwardDecision::Start,
        converged: larger.converged,
        init,
    }];

    while let Some(dim) = larger.params.dimmest_bead() {
        let init = larger.params.without_bead(dim);
        let k = init.bead_count();
        let smaller = fit_mle_with(frame, k, &init, &sweep)?;
        // l_n is twice the Gaussian log-likelihood.
        let g2 = likelihood_ratio(smaller.objective / 2.0, larger.objective / 2.0);
        let keep = g2 > config.lrt_threshold;
        backward.push(BackwardStep {
            k,
            log_likelihood: smaller.objective,
            g2: Some(g2),
            decision: if keep {
                BackwardDecision::KeepBead
            } else {
                BackwardDecision::RemoveBead
            },
            converged: smaller.converged,
            init,
        });
        if keep {
            break;
        }
        larger = smaller;
    }

    attach_information(frame, &mut larger);
    let trace = SelectionTrace {
        forward,
        backward,
        selected_k: larger.params.bead_count(),
        truncated,
    };
    Ok((larger, trace))
}

impl SelectionTrace {
    /// Start point of the maximum-likelihood fit that was selected.
    pub fn selected_init(&self) -> Option<&ModelParams> {
        self.backward
            .iter()
            .find(|s| s.k == self.selected_k)
            .map(|s| &s.init)
    }
}
