mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::*;
use tvmr::basis::{effect_curve, make_basis, transform_scores, BasisFamily, BasisKind};
use tvmr::diagnostics::{cochran_q_transform, compute_summary_stats, conditional_f, SampleSplit};
use tvmr::fpca::eigendecompose;
use tvmr::grid::TimeGrid;
use tvmr::longdata::center_columns;
use tvmr::mpcmr::{cue_objective, fit_cue, fit_mpcmr, moment_fn, GmmProblem};
use tvmr::robust::{lm_confidence, lm_projection, lm_statistic, DeltaEstimator, LmOptions};
use tvmr::study::band_covers;

fn problem(d: &IvData) -> GmmProblem {
    GmmProblem::centered(&d.z, &d.x, &d.y).unwrap()
}

fn random_psd(m: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(m, rank, |_, _| normal(&mut r));
    &a * a.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn centering_is_idempotent_and_keeps_variances(rows in 3usize..40, cols in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| 5.0 + 3.0 * normal(&mut r));
        let c = center_columns(&m);
        let cc = center_columns(&c);
        prop_assert!((&c - &cc).amax() < 1e-12);
        for j in 0..cols {
            let a: Vec<f64> = m.column(j).iter().copied().collect();
            let b: Vec<f64> = c.column(j).iter().copied().collect();
            prop_assert!(mean(&b).abs() < 1e-12 * variance(&a).sqrt().max(1.0));
            prop_assert!((variance(&a) - variance(&b)).abs() < 1e-10 * variance(&a).max(1.0));
        }
    }

    #[test]
    fn eigendecomposition_is_orthonormal_and_monotone(m in 11usize..40, rank in 1usize..8, seed in any::<u64>()) {
        let grid = TimeGrid::new(0.0, 10.0, m).unwrap();
        let e = eigendecompose(&random_psd(m, rank, seed), &grid, 1.0).unwrap();
        for j in 0..e.phi.len() {
            for k in 0..e.phi.len() {
                let want = if j == k { 1.0 } else { 0.0 };
                prop_assert!((grid.inner(&e.phi[j], &e.phi[k]) - want).abs() <= 1e-6);
            }
            prop_assert!(grid.integrate(&e.phi[j]) >= -1e-12);
        }
        prop_assert!(e.lambda.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(e.lambda.iter().all(|&l| l >= 0.0));
        prop_assert!(e.fve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(*e.fve.last().unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn eigenvalues_match_jacobi(m in 11usize..50, seed in any::<u64>()) {
        let grid = TimeGrid::new(0.0, 5.0, m).unwrap();
        let c = random_psd(m, m, seed);
        let e = eigendecompose(&c, &grid, 1.0).unwrap();
        let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
        let oracle = jacobi_eigenvalues(&DMatrix::from_fn(m, m, |i, j| sw[i] * c[(i, j)] * sw[j]));
        let scale = oracle[0].max(1.0);
        for (a, b) in e.lambda.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn effect_curve_is_linear(k in 1usize..5, a in -3.0f64..3.0, seed in any::<u64>()) {
        let model = legendre_model(51, k, 10, seed);
        let basis = make_basis(BasisFamily::Poly.with_size(k), k, &model).unwrap();
        let mut r = rng(seed);
        let c1 = random_vec(&mut r, k, 2.0);
        let c2 = random_vec(&mut r, k, 2.0);
        let mixed: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + y).collect();
        let lhs = effect_curve(&mixed, &basis);
        let (f1, f2) = (effect_curve(&c1, &basis), effect_curve(&c2, &basis));
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * f1[i] + f2[i])).abs() <= 1e-12 * (1.0 + lhs[i].abs()));
        }
    }

    #[test]
    fn eigen_basis_round_trip_and_identity_transform(k in 1usize..6, seed in any::<u64>()) {
        let model = random_surface_model(k, seed);
        let k = model.n_components();
        let basis = make_basis(BasisKind::Eigenfunction, k, &model).unwrap();
        let mut r = rng(seed);
        let c = random_vec(&mut r, k, 3.0);
        let curve = effect_curve(&c, &basis);
        for (j, cj) in c.iter().enumerate() {
            prop_assert!((model.grid.inner(&curve, &model.phi[j]) - cj).abs() <= 1e-8);
        }
        let scores = DMatrix::from_fn(20, k, |_, _| normal(&mut r));
        let t = transform_scores(&scores, &basis).unwrap();
        prop_assert!((t - &scores).amax() <= 1e-6);
    }

    #[test]
    fn cue_objective_is_nonnegative_and_instrument_scale_free(j in 2usize..7, seed in any::<u64>(), c in 0.1f64..10.0) {
        let d = iv_data(300, j, 1, 0.6, 0.7, seed);
        let p = problem(&d);
        let fit = fit_cue(&p).unwrap();
        prop_assert!(fit.objective_value >= 0.0);
        let mut r = rng(seed ^ 5);
        let b = random_vec(&mut r, 1, 3.0);
        prop_assert!(cue_objective(&p, &b) >= 0.0);
        let mut z = d.z.clone();
        let col = seed as usize % j;
        z.column_mut(col).scale_mut(-c);
        let scaled = fit_cue(&GmmProblem::centered(&z, &d.x, &d.y).unwrap()).unwrap();
        prop_assert!((scaled.gamma_hat[0] - fit.gamma_hat[0]).abs() <= 1e-8 * (1.0 + fit.gamma_hat[0].abs()));
    }

    #[test]
    fn se_curve_is_the_basis_quadratic_form(seed in any::<u64>(), l in 1usize..4) {
        let model = legendre_model(51, l, 300, seed);
        let basis = make_basis(BasisFamily::Poly.with_size(l), l, &model).unwrap();
        let d = iv_data(300, l + 2, l, 0.8, 0.5, seed);
        let fit = fit_mpcmr(&problem(&d), &basis).unwrap();
        for i in 0..fit.t.len() {
            let b = DVector::from_iterator(l, basis.b.iter().map(|f| f[i]));
            let q = b.dot(&(&fit.sigma_hat * &b));
            prop_assert!((fit.se_curve[i].powi(2) - q).abs() <= 1e-12 * (1.0 + q));
            prop_assert!(fit.gmm_lo[i] <= fit.beta_curve[i] && fit.beta_curve[i] <= fit.gmm_hi[i]);
        }
    }

    #[test]
    fn lm_is_nonnegative_and_vanishes_at_cue(j in 2usize..7, l in 1usize..3, seed in any::<u64>()) {
        prop_assume!(j >= l);
        let d = iv_data(300, j, l, 0.7, 0.7, seed);
        let p = problem(&d);
        let fit = fit_cue(&p).unwrap();
        prop_assert!(lm_statistic(&p, &fit.gamma_hat).unwrap() < 1e-6);
        let mut r = rng(seed ^ 9);
        for _ in 0..5 {
            let b = random_vec(&mut r, l, 2.0);
            prop_assert!(lm_statistic(&p, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn lm_projection_is_idempotent(j in 2usize..7, seed in any::<u64>()) {
        let d = iv_data(200, j, 2.min(j), 0.7, 0.7, seed);
        let p = problem(&d);
        let mut r = rng(seed);
        let b = random_vec(&mut r, p.n_params(), 1.0);
        for delta in [DeltaEstimator::Homoskedastic, DeltaEstimator::Pointwise] {
            let proj = lm_projection(&p, &b, delta).unwrap();
            prop_assert!((&proj * &proj - &proj).amax() <= 1e-10);
        }
    }

    #[test]
    fn moments_vanish_in_just_identified_fit(l in 1usize..4, seed in any::<u64>()) {
        let d = iv_data(200, l, l, 0.8, 0.7, seed);
        let p = problem(&d);
        let fit = fit_cue(&p).unwrap();
        let (g, _) = moment_fn(&p, &fit.gamma_hat);
        prop_assert!(g.norm() <= 1e-8);
        prop_assert!(fit.objective_value.abs() <= 1e-8);
    }

    #[test]
    fn conditional_f_is_instrument_scale_free(seed in any::<u64>(), c in 0.05f64..20.0) {
        let d = iv_data(400, 5, 2, 0.5, 0.5, seed);
        let f = conditional_f(&d.x, &d.z, 0).unwrap();
        let mut z = d.z.clone();
        z.column_mut(2).scale_mut(c);
        let g = conditional_f(&d.x, &z, 0).unwrap();
        prop_assert!((f - g).abs() <= 1e-8 * f.max(1.0));
    }

    #[test]
    fn band_coverage_accepts_truth_inside(lo in -5.0f64..5.0, w in 0.0f64..5.0, frac in 0.0f64..1.0) {
        prop_assert!(band_covers(lo, lo + w, false, false, lo + frac * w));
        prop_assert!(band_covers(lo, lo + w, false, true, lo + w + 100.0));
        prop_assert!(band_covers(lo, lo + w, true, false, lo - 100.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn q_is_invariant_to_full_rank_transformations(seed in any::<u64>()) {
        let d = iv_data(1500, 8, 2, 0.4, 0.6, seed);
        let stats = compute_summary_stats(&d.z, &d.x, &d.y, &SampleSplit::full(1500)).unwrap();
        let mut r = rng(seed ^ 3);
        let b = DMatrix::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 0.0 } + normal(&mut r) * 0.5);
        prop_assume!(b.determinant().abs() > 0.1);
        let a = cochran_q_transform(&stats, &DMatrix::identity(2, 2)).unwrap();
        let q = cochran_q_transform(&stats, &b).unwrap();
        prop_assert!((a.statistic - q.statistic).abs() <= 1e-8 * (1.0 + a.statistic));
        prop_assert!(q.statistic >= 0.0 && q.df == 6);
    }

    #[test]
    fn robust_q_does_not_exceed_step_zero_q(seed in any::<u64>(), overlap in any::<bool>()) {
        let d = iv_data(1500, 8, 2, 0.4, 0.6, seed);
        let split = if overlap {
            SampleSplit::full(1500)
        } else {
            SampleSplit { exposure: (0..750).collect(), outcome: (750..1500).collect() }
        };
        let stats = compute_summary_stats(&d.z, &d.x, &d.y, &split).unwrap();
        let q = cochran_q_transform(&stats, &DMatrix::identity(2, 2)).unwrap();
        prop_assert!(q.statistic <= q.statistic_initial, "{} > {}", q.statistic, q.statistic_initial);
    }

    #[test]
    fn refining_the_lm_grid_never_loses_accepted_region(seed in any::<u64>()) {
        let model = legendre_model(51, 2, 400, seed);
        let basis = make_basis(BasisFamily::Poly.with_size(2), 2, &model).unwrap();
        let d = iv_data(400, 6, 2, 0.3, 0.7, seed);
        let p = problem(&d);
        let fit = fit_mpcmr(&p, &basis).unwrap();
        let hull = |m: usize| {
            let opts = LmOptions { m, ..LmOptions::default() };
            let (grid, _) = lm_confidence(&p, &fit, &basis, &opts).unwrap();
            let acc = grid.accepted();
            let step: Vec<f64> = grid.axes.iter().map(|a| a[1] - a[0]).collect();
            let bounds: Vec<(f64, f64)> = (0..2)
                .map(|l| {
                    let v = acc.iter().map(|&c| grid.candidate(c)[l]);
                    (v.clone().fold(f64::INFINITY, f64::min), v.fold(f64::NEG_INFINITY, f64::max))
                })
                .collect();
            (bounds, step)
        };
        let (coarse, step) = hull(11);
        let (fine, _) = hull(21);
        for l in 0..2 {
            prop_assert!(fine[l].0 <= coarse[l].0 + step[l] + 1e-12);
            prop_assert!(fine[l].1 >= coarse[l].1 - step[l] - 1e-12);
        }
    }
}
