use beadloc::diagnose::{diagnostics_for_params, diagnostics_report, DiagnosticFlag, LagBins};
use beadloc::fit::{fit_mle, fit_mle_with, fit_ols, FitOptions};
use beadloc::model::{log_likelihood, residual_sum_squares, standardized_residuals};
use beadloc::select::{locate_beads, BackwardDecision, SelectConfig};
use beadloc::simulate::{simulate_frame, DesignPreset, NoiseLaw};
use beadloc::{BeadParams, Grid, ImageFrame, ModelParams, Param};

fn typical1(seed: u64) -> ImageFrame {
    simulate_frame(&DesignPreset::Typical1.design().with_seed(seed)).unwrap()
}

fn nearest(beads: &[BeadParams], x: f64, y: f64) -> (usize, f64) {
    beads
        .iter()
        .enumerate()
        .map(|(i, b)| (i, (b.x - x).hypot(b.y - y)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[test]
fn typical1_center_and_standard_error() {
    let (fit, trace) = locate_beads(&typical1(3), &SelectConfig::default()).unwrap();
    assert_eq!(trace.selected_k, 1);
    assert!(fit.converged);
    let b = fit.params.beads[0];
    assert!((b.x - 7823.0).abs() < 3.0 * 0.422, "x {}", b.x);
    assert!((b.y - 3353.0).abs() < 3.0 * 0.422, "y {}", b.y);
    let se = fit.std_error(Param::X(0)).unwrap();
    assert!((0.40..=0.445).contains(&se), "SE {se}");
}

#[test]
fn information_is_symmetric_positive_definite_at_the_optimum() {
    let (fit, _) = locate_beads(&typical1(8), &SelectConfig::default()).unwrap();
    let info = fit.info_matrix.unwrap();
    assert_eq!(info, info.transpose());
    assert!(info.symmetric_eigen().eigenvalues.min() > 0.0);
    let cov = fit.covariance.unwrap();
    let se = fit.std_errors.unwrap();
    for (i, s) in se.iter().enumerate() {
        assert!((s * s - cov[(i, i)]).abs() <= 1e-12 * cov[(i, i)]);
    }
}

#[test]
fn typical4_selects_four_beads() {
    let design = DesignPreset::Typical4.design();
    for seed in 0..4 {
        let frame = simulate_frame(&design.with_seed(seed)).unwrap();
        let (fit, trace) = locate_beads(&frame, &SelectConfig::default()).unwrap();
        assert_eq!(trace.selected_k, 4, "seed {seed}");
        for t in &design.truth.beads {
            assert!(nearest(&fit.params.beads, t.x, t.y).1 < 5.0);
        }
    }
}

#[test]
fn pure_background_selects_no_beads() {
    let mut design = DesignPreset::Typical1.design();
    design.truth.beads.clear();
    for seed in 0..3 {
        let frame = simulate_frame(&design.with_seed(seed)).unwrap();
        let (fit, trace) = locate_beads(&frame, &SelectConfig::default()).unwrap();
        assert_eq!(trace.selected_k, 0, "seed {seed}");
        assert!((fit.params.background - 200.0).abs() < 1.0);
    }
}

#[test]
fn dim_bead_is_found_with_a_wide_standard_error() {
    let design = DesignPreset::Dim.design();
    let frame = simulate_frame(&design.with_seed(1)).unwrap();
    let (fit, trace) = locate_beads(&frame, &SelectConfig::default()).unwrap();
    assert_eq!(trace.selected_k, 4);
    let dim = design.truth.beads[3];
    assert_eq!(dim.amplitude, 400.0);
    let (i, d) = nearest(&fit.params.beads, dim.x, dim.y);
    assert!(d < 25.0, "dim bead off by {d}");
    let se_x = fit.std_error(Param::X(i)).unwrap();
    let se_y = fit.std_error(Param::Y(i)).unwrap();
    assert!((4.0..=6.5).contains(&se_x) && (4.0..=6.5).contains(&se_y), "{se_x} {se_y}");
}

#[test]
fn selected_fit_reruns_identically_from_its_init() {
    let frame = simulate_frame(&DesignPreset::Close.design().with_seed(4)).unwrap();
    let config = SelectConfig::default();
    let (fit, trace) = locate_beads(&frame, &config).unwrap();
    let init = trace.selected_init().unwrap();
    let options = FitOptions {
        max_iterations: config.max_iterations,
        information: true,
    };
    let again = fit_mle_with(&frame, trace.selected_k, init, &options).unwrap();
    assert_eq!(format!("{fit:?}"), format!("{again:?}"));
}

#[test]
fn sweeps_are_monotone() {
    for (preset, seed) in [(DesignPreset::Typical4, 9), (DesignPreset::Dim, 2), (DesignPreset::Partial, 5)] {
        let frame = simulate_frame(&preset.design().with_seed(seed)).unwrap();
        let (_, trace) = locate_beads(&frame, &SelectConfig::default()).unwrap();
        for w in trace.forward.windows(2) {
            assert!(w[1].rss <= w[0].rss, "{preset:?}: RSS rose from k={} to k={}", w[0].k, w[1].k);
        }
        let last = trace.forward.last().unwrap();
        let prev = &trace.forward[trace.forward.len() - 2];
        assert!(last.ic > prev.ic || trace.truncated);
        for w in trace.backward.windows(2) {
            assert_eq!(w[1].k + 1, w[0].k);
            assert!(w[1].log_likelihood <= w[0].log_likelihood, "{preset:?}");
            assert!(w[1].g2.unwrap() >= 0.0);
        }
        let last = trace.backward.last().unwrap();
        assert!(last.decision == BackwardDecision::KeepBead || last.k == 0);
    }
}

#[test]
fn optimizer_steps_improve_the_objective() {
    let design = DesignPreset::Typical4.design();
    let frame = simulate_frame(&design.with_seed(12)).unwrap();
    let mut init = design.truth.clone();
    for (j, b) in init.beads.iter_mut().enumerate() {
        b.x += 40.0 - 20.0 * j as f64;
        b.y -= 30.0;
        b.amplitude *= 0.8;
    }
    init.psf_width = 260.0;
    let ols = fit_ols(&frame, 4, &init).unwrap();
    assert!(ols.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(ols.objective <= residual_sum_squares(&design.truth, &frame));
    let mle = fit_mle(&frame, 4, &ols.params).unwrap();
    assert!(mle.objective_trace.windows(2).all(|w| w[1] >= w[0]));
    assert!(mle.objective >= log_likelihood(&design.truth, &frame).unwrap());
}

#[test]
fn bead_order_does_not_change_the_fit() {
    let design = DesignPreset::Typical4.design();
    let frame = simulate_frame(&design.with_seed(6)).unwrap();
    let a = fit_mle(&frame, 4, &design.truth).unwrap();
    let mut reversed = design.truth.clone();
    reversed.beads.reverse();
    let b = fit_mle(&frame, 4, &reversed).unwrap();
    assert!((a.objective - b.objective).abs() <= 1e-6 * a.objective.abs());
    for bead in &a.params.beads {
        assert!(nearest(&b.params.beads, bead.x, bead.y).1 < 1e-3);
    }
}

#[test]
fn dropping_a_true_bead_lowers_the_likelihood() {
    let design = DesignPreset::Typical4.design();
    let frame = simulate_frame(&design.with_seed(2)).unwrap();
    let full = log_likelihood(&design.truth, &frame).unwrap();
    for j in 0..4 {
        let less = log_likelihood(&design.truth.without_bead(j), &frame).unwrap();
        assert!(less < full);
    }
}

#[test]
fn residuals_at_truth_are_standard() {
    let design = DesignPreset::Typical4.design();
    let frame = simulate_frame(&design.with_seed(7)).unwrap();
    let res = standardized_residuals(&design.truth, &frame).unwrap();
    assert!(res.mean().abs() < 0.04);
    assert!((0.94..=1.06).contains(&res.variance()));
}

#[test]
fn well_specified_fit_is_clean() {
    let frame = typical1(21);
    let (fit, _) = locate_beads(&frame, &SelectConfig::default()).unwrap();
    let report = diagnostics_report(&frame, &fit).unwrap();
    assert!(report.is_clean(), "{:?}", report.flags);
}

#[test]
fn missing_bead_shows_in_the_variogram() {
    let design = DesignPreset::Typical4.design();
    let frame = simulate_frame(&design.with_seed(3)).unwrap();
    let init = design.truth.without_bead(0);
    let bins = LagBins::default_for(frame.grid());

    // Least squares keeps theta at its true value, so the unexplained bead
    // inflates the short-lag variogram.
    let ols = fit_ols(&frame, 3, &init).unwrap();
    let report = diagnostics_for_params(&frame, &ols.params, &bins).unwrap();
    assert!(report.matheron.bins[0].gamma > 1.0);
    assert!(report.cressie.bins[0].gamma > 1.0);
    assert!(report.flags.iter().any(|f| matches!(f, DiagnosticFlag::VariogramBin { .. })));

    // Maximum likelihood absorbs the misfit into theta; the residuals are
    // then smooth, and the variogram rises with lag instead of staying flat.
    let mle = fit_mle(&frame, 3, &init).unwrap();
    assert!(mle.params.instrument_var > 100.0 * 100.0);
    let report = diagnostics_report(&frame, &mle).unwrap();
    assert!(report.matheron.bins[0].gamma < 0.5 * report.matheron.bins[5].gamma);
    assert!(report.flags.iter().any(|f| matches!(f, DiagnosticFlag::VariogramBin { .. })));
}

#[test]
fn exponential_noise_bends_the_lower_tail() {
    // Centered exponential noise is bounded below, so the lower tail of the
    // residuals is lighter than normal and its Q-Q slope drops below one.
    let design = DesignPreset::Typical1.design().with_noise(NoiseLaw::CenteredExponential);
    for seed in 0..4 {
        let frame = simulate_frame(&design.with_seed(seed)).unwrap();
        let (fit, _) = locate_beads(&frame, &SelectConfig::default()).unwrap();
        let report = diagnostics_report(&frame, &fit).unwrap();
        assert!(report.lower_tail_slope < 0.9, "seed {seed}: slope {}", report.lower_tail_slope);
    }
}

#[test]
fn constant_frame_raises_the_variance_flag() {
    let grid = Grid::new(20, 20, 100.0).unwrap();
    let frame = ImageFrame::filled(grid, 200.0).unwrap();
    let params = ModelParams::new(vec![], 1.0, 200.0, 100.0);
    let report = diagnostics_for_params(&frame, &params, &LagBins::default_for(&grid)).unwrap();
    assert_eq!(report.residual_variance, 0.0);
    assert!(report.flags.iter().any(|f| matches!(f, DiagnosticFlag::ResidualVariance { .. })));
}
