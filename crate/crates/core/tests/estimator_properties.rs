mod common;

use gmv_core::covariance::{lw_linear, lw_nonlinear, poet, sample_cov, select_poet_k, CovEstimate, CovMeta, Estimator, EstimatorConfig};
use gmv_core::market_data::{synth_factor_returns, ReturnPanel};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn panel(t: usize, n: usize, seed: u64) -> ReturnPanel {
    let mut rng = common::rng(seed);
    let x = common::gaussian_matrix(&mut rng, t, n) * 0.01;
    ReturnPanel::from_matrix(x).unwrap()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn spectrum(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn all_estimates(window: &ReturnPanel) -> Vec<CovEstimate> {
    Estimator::ALL
        .iter()
        .map(|e| EstimatorConfig::new(*e).estimate(window).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_are_symmetric_and_psd(seed in any::<u64>(), n in 2usize..8) {
        let window = panel(40, n, seed);
        for est in all_estimates(&window) {
            prop_assert_eq!(&est.matrix, &est.matrix.transpose());
            let scale = est.matrix.amax().max(f64::MIN_POSITIVE);
            prop_assert!(min_eigenvalue(&est.matrix) >= -1e-12 * scale, "{}", est.estimator);
            prop_assert!(est.matrix.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn estimators_are_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, rot in 1usize..6) {
        let window = panel(40, n, seed);
        let perm: Vec<usize> = (0..n).map(|j| (j + rot) % n).collect();
        let permuted = window.select_assets(&perm).unwrap();
        for (a, b) in all_estimates(&window).iter().zip(all_estimates(&permuted)) {
            let scale = a.matrix.amax();
            for i in 0..n {
                for j in 0..n {
                    let diff = (b.matrix[(i, j)] - a.matrix[(perm[i], perm[j])]).abs();
                    prop_assert!(diff <= 1e-10 * scale, "{} differs by {diff:e}", a.estimator);
                }
            }
        }
    }

    #[test]
    fn linear_intensity_stays_in_unit_interval(seed in any::<u64>(), n in 2usize..10, t in 3usize..60) {
        let est = lw_linear(&panel(t, n, seed)).unwrap();
        match est.meta {
            CovMeta::LinearShrinkage { intensity, .. } => prop_assert!((0.0..=1.0).contains(&intensity)),
            other => prop_assert!(false, "unexpected meta {other:?}"),
        }
    }

    #[test]
    fn poet_without_threshold_is_sample(seed in any::<u64>(), n in 2usize..8, k in 0usize..3) {
        let window = panel(30, n, seed);
        let k = k.min(n);
        let p = poet(&window, k, 0.0).unwrap();
        let s = sample_cov(&window).unwrap();
        prop_assert!((&p.matrix - &s.matrix).amax() <= 1e-10 * s.matrix.amax().max(1e-300));
    }
}

#[test]
fn nonlinear_preserves_eigenvectors() {
    let window = synth_factor_returns(30, 120, 3, 5).unwrap().panel;
    let s = sample_cov(&window).unwrap().matrix;
    let nl = lw_nonlinear(&window).unwrap().matrix;
    let eig = SymmetricEigen::new(s);
    for j in 0..30 {
        let v = eig.eigenvectors.column(j);
        let image = &nl * v;
        let rayleigh = v.dot(&image);
        assert!((image - v * rayleigh).norm() < 1e-10 * nl.norm(), "eigenvector {j} not preserved");
    }
}

#[test]
fn nonlinear_on_white_noise_is_close_to_identity() {
    let mut rng = common::rng(17);
    let x = common::gaussian_matrix(&mut rng, 50_000, 2) * 0.1;
    let est = lw_nonlinear(&ReturnPanel::from_matrix(x).unwrap()).unwrap();
    let err = (est.matrix * 100.0 - DMatrix::<f64>::identity(2, 2)).amax();
    assert!(err < 0.02, "entrywise error {err}");
}

#[test]
fn nonlinear_narrows_spread_and_keeps_trace() {
    for seed in 0..10 {
        let window = synth_factor_returns(30, 120, 3, seed).unwrap().panel;
        let s = spectrum(&sample_cov(&window).unwrap().matrix);
        let nl = spectrum(&lw_nonlinear(&window).unwrap().matrix);
        assert!(nl[0] - nl[29] <= s[0] - s[29], "seed {seed}: spread grew");
        let long = synth_factor_returns(20, 200, 2, seed).unwrap().panel;
        let ts = sample_cov(&long).unwrap().matrix.trace();
        let tn = lw_nonlinear(&long).unwrap().matrix.trace();
        assert!((tn - ts).abs() <= 0.1 * ts, "seed {seed}: trace {tn} vs {ts}");
    }
}

#[test]
fn poet_beats_sample_on_one_factor_data_on_average() {
    let (mut poet_err, mut sample_err) = (0.0, 0.0);
    for seed in 0..20 {
        let synth = synth_factor_returns(30, 250, 1, 100 + seed).unwrap();
        poet_err += (poet(&synth.panel, 1, 0.5).unwrap().matrix - &synth.sigma_true).norm();
        sample_err += (sample_cov(&synth.panel).unwrap().matrix - &synth.sigma_true).norm();
    }
    assert!(poet_err < sample_err, "poet {poet_err} vs sample {sample_err}");
}

#[test]
fn factor_count_selection_finds_one_factor() {
    let hits = (0..20)
        .filter(|seed| {
            let synth = synth_factor_returns(30, 250, 1, 200 + seed).unwrap();
            select_poet_k(&synth.panel, &[1, 2, 3, 4, 5, 6, 7, 8], 0.5).unwrap() == 1
        })
        .count();
    assert!(hits > 10, "selected K = 1 in {hits}/20 seeds");
}
