use beadloc::diagnose::{empirical_variogram, LagBins, VariogramEstimator};
use beadloc::infer::ConfidenceEllipse;
use beadloc::model::{log_likelihood, log_likelihood_gradient, render, residual_sum_squares, standardized_residuals, ResidualField};
use beadloc::select::{free_param_count, information_criterion};
use beadloc::{BeadParams, Grid, ImageFrame, ModelParams, ParamLayout};
use proptest::prelude::*;

fn bead(max: f64) -> impl Strategy<Value = BeadParams> {
    (0.0..max, 0.0..max, 100.0..20000.0f64).prop_map(|(x, y, a)| BeadParams::new(x, y, a))
}

fn params(max_beads: usize) -> impl Strategy<Value = ModelParams> {
    (
        prop::collection::vec(bead(16.0 * 117.0), 0..=max_beads),
        100.0..500.0f64,
        0.0..1000.0f64,
        1.0..300.0f64,
    )
        .prop_map(|(beads, s, b, theta)| ModelParams::new(beads, s, b, theta))
}

/// A frame of deterministic pseudo-noise around the rendered intensities.
fn noisy_frame(p: &ModelParams, grid: Grid, salt: u64) -> ImageFrame {
    let f = render(p, &grid);
    let z = f
        .iter()
        .enumerate()
        .map(|(i, fi)| {
            let u = ((i as u64 + 1).wrapping_mul(2654435761).wrapping_add(salt) % 1000) as f64 / 1000.0 - 0.5;
            fi + 3.0 * u * (fi + p.instrument_var).sqrt()
        })
        .collect();
    ImageFrame::from_grid(grid, z).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_matches_central_differences(p in params(2), salt in 0u64..1000) {
        let grid = Grid::new(16, 16, 117.0).unwrap();
        let frame = noisy_frame(&p, grid, salt);
        let layout = ParamLayout::new(p.bead_count(), true);
        let beta = layout.pack(&p);
        let (_, g) = log_likelihood_gradient(&p, &frame).unwrap();
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        for k in 0..beta.len() {
            let h = 1e-5 * beta[k].abs().max(1.0);
            let at = |d: f64| {
                let mut b = beta.clone();
                b[k] += d;
                log_likelihood(&layout.unpack(&b, &p), &frame).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1e-3 * scale), "k {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn shifting_by_whole_pixels_shifts_the_image(p in params(3), dc in 0usize..4, dr in 0usize..4) {
        let grid = Grid::new(12, 12, 117.0).unwrap();
        let big = Grid::new(16, 16, 117.0).unwrap();
        let mut moved = p.clone();
        for b in &mut moved.beads {
            b.x += dc as f64 * 117.0;
            b.y += dr as f64 * 117.0;
        }
        let f = render(&p, &grid);
        let g = render(&moved, &big);
        for r in 0..12 {
            for c in 0..12 {
                let a = f[r * 12 + c];
                let b = g[(r + dr) * 16 + c + dc];
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn bead_contributions_add(p in params(4)) {
        let grid = Grid::new(10, 10, 117.0).unwrap();
        let total = render(&p, &grid);
        let background_only = ModelParams { beads: Vec::new(), ..p.clone() };
        let mut sum = render(&background_only, &grid);
        for b in &p.beads {
            let single = ModelParams { beads: vec![*b], background: 0.0, ..p.clone() };
            for (s, v) in sum.iter_mut().zip(render(&single, &grid)) {
                *s += v;
            }
        }
        for (a, b) in total.iter().zip(&sum) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn likelihood_ignores_bead_order(p in params(4), salt in 0u64..1000) {
        let grid = Grid::new(12, 12, 117.0).unwrap();
        let frame = noisy_frame(&p, grid, salt);
        let mut reversed = p.clone();
        reversed.beads.reverse();
        let a = log_likelihood(&p, &frame).unwrap();
        let b = log_likelihood(&reversed, &frame).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn residuals_reconstruct_the_frame(p in params(3), salt in 0u64..1000) {
        let grid = Grid::new(12, 12, 117.0).unwrap();
        let frame = noisy_frame(&p, grid, salt);
        let f = render(&p, &grid);
        let res = standardized_residuals(&p, &frame).unwrap();
        for i in 0..frame.len() {
            let z = f[i] + res.values()[i] * (f[i] + p.instrument_var).sqrt();
            prop_assert!((z - frame.counts()[i]).abs() <= 1e-8 * frame.counts()[i].abs().max(1.0));
        }
        let rss: f64 = frame.counts().iter().zip(&f).map(|(z, fi)| (z - fi) * (z - fi)).sum();
        prop_assert!((rss - residual_sum_squares(&p, &frame)).abs() <= 1e-9 * rss.max(1.0));
    }

    #[test]
    fn pack_then_unpack_is_identity(p in params(5), with_theta: bool) {
        let layout = ParamLayout::new(p.bead_count(), with_theta);
        let v = layout.pack(&p);
        prop_assert_eq!(v.len(), layout.len());
        let back = layout.unpack(&v, &p);
        prop_assert_eq!(back, p);
    }

    #[test]
    fn criterion_is_linear_in_bead_count(rss in 1.0..1e9f64, n in 1usize..100_000, k in 0usize..20) {
        let a = information_criterion(rss, n, free_param_count(k)).unwrap();
        let b = information_criterion(rss, n, free_param_count(k + 1)).unwrap();
        prop_assert!((b - a - 3.0 * (n as f64).sqrt()).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
    }

    #[test]
    fn variogram_ignores_sign_and_shift(values in prop::collection::vec(-5.0..5.0f64, 64), shift in -100.0..100.0f64) {
        let grid = Grid::new(8, 8, 1.0).unwrap();
        let bins = LagBins::default_for(&grid);
        let base = ResidualField::new(grid, values.clone()).unwrap();
        let neg = ResidualField::new(grid, values.iter().map(|v| -v).collect()).unwrap();
        let moved = ResidualField::new(grid, values.iter().map(|v| v + shift).collect()).unwrap();
        for est in [VariogramEstimator::Matheron, VariogramEstimator::CressieRobust] {
            let a = empirical_variogram(&base, &bins, est).unwrap();
            for other in [&neg, &moved] {
                let b = empirical_variogram(other, &bins, est).unwrap();
                for (x, y) in a.bins.iter().zip(&b.bins) {
                    prop_assert_eq!(x.pairs, y.pairs);
                    prop_assert!((x.gamma - y.gamma).abs() <= 1e-9 * x.gamma.abs().max(1e-6));
                }
            }
        }
    }

    #[test]
    fn rotated_ellipse_rotates_with_covariance(
        sx in 0.1..10.0f64,
        sy in 0.1..10.0f64,
        angle in -1.5..1.5f64,
        level in 0.5..0.999f64,
    ) {
        let (c, s) = (angle.cos(), angle.sin());
        let cov = [
            [c * c * sx * sx + s * s * sy * sy, c * s * (sx * sx - sy * sy)],
            [c * s * (sx * sx - sy * sy), s * s * sx * sx + c * c * sy * sy],
        ];
        let e = ConfidenceEllipse::new([0.0, 0.0], cov, level).unwrap();
        let q = -2.0 * (1.0 - level).ln();
        let (major, minor) = (sx.max(sy), sx.min(sy));
        prop_assert!((e.semi_major - major * q.sqrt()).abs() <= 1e-8 * major);
        prop_assert!((e.semi_minor - minor * q.sqrt()).abs() <= 1e-8 * major);
        prop_assert!((e.area() - std::f64::consts::PI * q * sx * sy).abs() <= 1e-8 * e.area());
        // A point on the boundary along the major axis.
        let dir = if sx >= sy { angle } else { angle + std::f64::consts::FRAC_PI_2 };
        let edge = [e.semi_major * dir.cos(), e.semi_major * dir.sin()];
        prop_assert!((e.distance_sq(edge) - q).abs() <= 1e-6 * q);
    }
}
