//! Comparator estimators: pooled-IPD g-formula and REML random-effects
//! meta-analysis / meta-regression.

use nalgebra::{DMatrix, DVector};

use super::{IndividualData, SimError};
use crate::aggdata::CovariateSample;
use crate::glm::{fit_logistic, weighted_gram};
use crate::linalg::{expit, inverse_spd, quad_form, standardized_singular_values};

/// g-formula over the target sample with the outcome model
/// `logit P(Y=1|A,X) = θ₁ᵀx⁺ + A(θ₂ + θ₃ᵀx)`, fitted on the pooled trials.
///
/// The SE combines target-sample variation of the predicted risk difference
/// with the HC0 sandwich covariance of the outcome-model coefficients.
pub fn ipd_gformula(data: &IndividualData, target: &CovariateSample) -> Result<(f64, f64), SimError> {
    let n = data.n_rows();
    let k = target.n_cols();
    let p = 2 * (k + 1);
    let design_row = |x: &[f64], a: f64, out: &mut [f64]| {
        out[0] = 1.0;
        out[k + 1] = a;
        for j in 0..k {
            out[1 + j] = x[j];
            out[k + 2 + j] = a * x[j];
        }
    };
    let mut xd = DMatrix::zeros(n, p);
    let mut buf = vec![0.0; p];
    for i in 0..n {
        design_row(data.row(i), data.a[i], &mut buf);
        for (j, v) in buf.iter().enumerate() {
            xd[(i, j)] = *v;
        }
    }
    let fit = fit_logistic(&xd, &data.y)?;
    let resid = DVector::from_iterator(n, (0..n).map(|i| data.y[i] - fit.fitted[i]));
    let meat = weighted_gram(&xd, &resid.map(|r| r * r));
    let v_theta = &fit.inv_information * meat * &fit.inv_information;

    let n0 = target.n_rows();
    let mut g = Vec::with_capacity(n0);
    let mut jpsi = DVector::zeros(p);
    let mut d1 = vec![0.0; p];
    let mut d0 = vec![0.0; p];
    for x in target.rows() {
        design_row(x, 1.0, &mut d1);
        design_row(x, 0.0, &mut d0);
        let m1 = expit(d1.iter().zip(fit.beta.iter()).map(|(a, b)| a * b).sum());
        let m0 = expit(d0.iter().zip(fit.beta.iter()).map(|(a, b)| a * b).sum());
        g.push(m1 - m0);
        for j in 0..p {
            jpsi[j] += m1 * (1.0 - m1) * d1[j] - m0 * (1.0 - m0) * d0[j];
        }
    }
    let n0f = n0 as f64;
    jpsi /= n0f;
    let psi = g.iter().sum::<f64>() / n0f;
    let ss: f64 = g.iter().map(|v| (v - psi).powi(2)).sum();
    let var = ss / (n0f * n0f) + quad_form(&jpsi, &v_theta);
    Ok((psi, var.max(0.0).sqrt()))
}

/// REML random-effects meta-regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRegression {
    pub beta: DVector<f64>,
    /// `(XᵀWX)⁻¹` at the REML τ².
    pub cov_beta: DMatrix<f64>,
    pub tau2: f64,
}

impl MetaRegression {
    /// Prediction at covariate row `x0` and its standard error.
    pub fn predict(&self, x0: &[f64]) -> (f64, f64) {
        let x = DVector::from_column_slice(x0);
        (x.dot(&self.beta), quad_form(&x, &self.cov_beta).max(0.0).sqrt())
    }
}

/// Random-effects pooled estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomEffects {
    pub pooled: f64,
    pub se: f64,
    pub tau2: f64,
}

fn gls(y: &[f64], v: &[f64], x: &DMatrix<f64>, tau2: f64) -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
    let w = DVector::from_iterator(v.len(), v.iter().map(|vi| 1.0 / (vi + tau2)));
    let xtwx = weighted_gram(x, &w);
    let inv = inverse_spd(&xtwx)?;
    let yv = DVector::from_column_slice(y);
    let xtwy = x.transpose() * yv.component_mul(&w);
    let beta = &inv * xtwy;
    let r = yv - x * &beta;
    let rss: f64 = r.iter().zip(w.iter()).map(|(ri, wi)| wi * ri * ri).sum();
    let logdet = xtwx.cholesky()?.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    Some((beta, inv, -0.5 * (v.iter().map(|vi| (vi + tau2).ln()).sum::<f64>() + logdet + rss)))
}

/// Restricted log-likelihood of τ² (up to a constant), or `None` when
/// `XᵀWX` is singular.
pub fn reml_log_likelihood(y: &[f64], v: &[f64], x: &DMatrix<f64>, tau2: f64) -> Option<f64> {
    gls(y, v, x, tau2).map(|(_, _, ll)| ll)
}

const GRID: usize = 400;
const GOLDEN_TOL: f64 = 1e-12;

fn maximize_reml(y: &[f64], v: &[f64], x: &DMatrix<f64>) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let spread = y.iter().map(|yi| (yi - mean).powi(2)).sum::<f64>();
    let vmax = v.iter().cloned().fold(0.0, f64::max);
    let upper = (10.0 * (spread + vmax)).max(1e-8);
    let f = |t: f64| reml_log_likelihood(y, v, x, t).unwrap_or(f64::NEG_INFINITY);
    let step = upper / GRID as f64;
    let (best, _) = (0..=GRID)
        .map(|i| (i, f(i as f64 * step)))
        .fold((0, f64::NEG_INFINITY), |acc, (i, fi)| if fi > acc.1 { (i, fi) } else { acc });
    let (mut a, mut b) = ((best.max(1) - 1) as f64 * step, (best + 1).min(GRID) as f64 * step);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL * (1.0 + b) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    if f(0.0) >= f(t) {
        0.0
    } else {
        t
    }
}

/// REML meta-regression of `y` (variances `v`) on design `x` (one row per
/// trial, intercept included by the caller).
pub fn meta_regression(y: &[f64], v: &[f64], x: &DMatrix<f64>) -> Result<MetaRegression, SimError> {
    let (m, p) = (x.nrows(), x.ncols());
    if m <= p {
        return Err(SimError::RankDeficient { trials: m, regressors: p });
    }
    let sv = standardized_singular_values(x);
    if sv.len() < p || sv.last().copied().unwrap_or(0.0) < 1e-10 * sv[0] {
        return Err(SimError::RankDeficient { trials: m, regressors: p });
    }
    let tau2 = maximize_reml(y, v, x);
    let (beta, cov_beta, _) = gls(y, v, x, tau2).ok_or(SimError::RankDeficient { trials: m, regressors: p })?;
    Ok(MetaRegression { beta, cov_beta, tau2 })
}

/// REML random-effects meta-analysis of marginal effects.
pub fn meta_random_effects(estimates: &[f64], se: &[f64]) -> Result<RandomEffects, SimError> {
    if estimates.len() < 2 {
        return Err(SimError::TooFewTrials { needed: 2, got: estimates.len() });
    }
    let v: Vec<f64> = se.iter().map(|s| s * s).collect();
    let x = DMatrix::from_element(estimates.len(), 1, 1.0);
    let fit = meta_regression(estimates, &v, &x)?;
    let (pooled, se) = fit.predict(&[1.0]);
    Ok(RandomEffects { pooled, se, tau2: fit.tau2 })
}
