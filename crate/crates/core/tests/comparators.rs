use aggcate::glm::fit_logistic;
use aggcate::simulate::{meta_random_effects, meta_regression, reml_log_likelihood};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Restricted log-likelihood of τ², written out term by term.
fn reml_oracle(y: &[f64], v: &[f64], x: &DMatrix<f64>, tau2: f64) -> f64 {
    let (m, p) = (x.nrows(), x.ncols());
    let w: Vec<f64> = v.iter().map(|vi| 1.0 / (vi + tau2)).collect();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for i in 0..m {
        for a in 0..p {
            xtwy[a] += w[i] * x[(i, a)] * y[i];
            for b in 0..p {
                xtwx[(a, b)] += w[i] * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let beta = xtwx.clone().lu().solve(&xtwy).unwrap();
    let rss: f64 = (0..m).map(|i| w[i] * (y[i] - (x.row(i) * &beta)[0]).powi(2)).sum();
    -0.5 * (v.iter().map(|vi| (vi + tau2).ln()).sum::<f64>() + xtwx.determinant().ln() + rss)
}

fn design(m: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(m, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reml_objective_matches_oracle_up_to_a_constant(seed in 0u64..10_000, m in 4usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = design(m, 2, &mut rng);
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..0.2)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(1e-4..4e-3)).collect();
        let offset = reml_log_likelihood(&y, &v, &x, 0.0).unwrap() - reml_oracle(&y, &v, &x, 0.0);
        for tau2 in [1e-5, 1e-3, 0.02, 0.5] {
            let d = reml_log_likelihood(&y, &v, &x, tau2).unwrap() - reml_oracle(&y, &v, &x, tau2);
            prop_assert!((d - offset).abs() <= 1e-9 * (1.0 + offset.abs()));
        }
    }

    #[test]
    fn reml_estimate_maximizes_the_oracle_on_a_grid(seed in 0u64..10_000, m in 4usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = design(m, 2, &mut rng);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(1e-4..4e-3)).collect();
        let spread = rng.random_range(0.0..0.1);
        let y: Vec<f64> = (0..m).map(|i| 0.05 * x[(i, 1)] + spread * rng.random_range(-1.0..1.0)).collect();
        let fit = meta_regression(&y, &v, &x).unwrap();
        let best = reml_oracle(&y, &v, &x, fit.tau2);
        for k in 0..=2000 {
            let t = 0.05 * (k as f64 / 2000.0).powi(2);
            prop_assert!(reml_oracle(&y, &v, &x, t) <= best + 1e-9, "τ² = {t} beats {}", fit.tau2);
        }
    }

    #[test]
    fn regression_coefficients_are_the_gls_closed_form(seed in 0u64..10_000, m in 4usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = design(m, 3, &mut rng);
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..0.2)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(1e-4..4e-3)).collect();
        let fit = meta_regression(&y, &v, &x).unwrap();
        let w = DMatrix::from_diagonal(&DVector::from_iterator(m, v.iter().map(|vi| 1.0 / (vi + fit.tau2))));
        let a = x.transpose() * &w * &x;
        let beta = a.clone().lu().solve(&(x.transpose() * &w * DVector::from_column_slice(&y))).unwrap();
        let cov = a.try_inverse().unwrap();
        prop_assert!((fit.beta - beta).amax() <= 1e-9);
        prop_assert!((fit.cov_beta - &cov).amax() <= 1e-9 * cov.amax());
    }

    #[test]
    fn logistic_fit_agrees_with_newton_oracle(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let truth = [-0.5, 0.8, -0.4];
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let eta: f64 = (0..3).map(|j| truth[j] * x[(i, j)]).sum();
                (rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())) as u8 as f64
            })
            .collect();
        let fit = fit_logistic(&x, &y).unwrap();
        let (beta, hessian) = newton_oracle(&x, &y);
        prop_assert!((fit.beta - &beta).amax() <= 1e-8);
        let inv = hessian.try_inverse().unwrap();
        prop_assert!((fit.inv_information - &inv).amax() <= 1e-8 * inv.amax());
    }
}

/// Newton–Raphson with step halving on the Bernoulli log-likelihood, and the
/// observed information at the optimum.
fn newton_oracle(x: &DMatrix<f64>, y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = (x.nrows(), x.ncols());
    let loglik = |b: &DVector<f64>| -> f64 {
        (0..n)
            .map(|i| {
                let eta = (x.row(i) * b)[0];
                y[i] * eta - (1.0 + eta.exp()).ln()
            })
            .sum()
    };
    let derivatives = |b: &DVector<f64>| {
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for i in 0..n {
            let pi = 1.0 / (1.0 + (-(x.row(i) * b)[0]).exp());
            for a in 0..p {
                g[a] += (y[i] - pi) * x[(i, a)];
                for c in 0..p {
                    h[(a, c)] += pi * (1.0 - pi) * x[(i, a)] * x[(i, c)];
                }
            }
        }
        (g, h)
    };
    let mut b = DVector::zeros(p);
    for _ in 0..100 {
        let (g, h) = derivatives(&b);
        let step = h.lu().solve(&g).unwrap();
        let mut t = 1.0;
        while loglik(&(&b + t * &step)) < loglik(&b) && t > 1e-8 {
            t *= 0.5;
        }
        b += t * &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    let (_, h) = derivatives(&b);
    (b, h)
}

#[test]
fn identical_trials_pool_exactly() {
    let re = meta_random_effects(&[-0.03, -0.03, -0.03], &[0.01, 0.02, 0.015]).unwrap();
    let w: f64 = [0.01f64, 0.02, 0.015].iter().map(|s| 1.0 / (s * s)).sum();
    assert_eq!(re.tau2, 0.0);
    assert!((re.pooled + 0.03).abs() < 1e-15);
    assert!((re.se - w.powf(-0.5)).abs() < 1e-15);
}
