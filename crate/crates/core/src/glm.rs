//! Logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{expit, inverse_spd};

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("IRLS did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("separation detected (|β|∞ = {0:.1})")]
    Separation(f64),
    #[error("singular information matrix")]
    Singular,
    #[error("outcomes must lie in [0, 1]")]
    BadOutcome,
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub beta: DVector<f64>,
    /// Inverse Fisher information `(XᵀVX)⁻¹`.
    pub inv_information: DMatrix<f64>,
    pub fitted: DVector<f64>,
    pub iterations: usize,
}

pub const MAX_ITER: usize = 100;
const TOL: f64 = 1e-10;
const SEPARATION: f64 = 30.0;

/// `Xᵀ diag(v) X`.
pub fn weighted_gram(x: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= v[i];
    }
    x.transpose() * xw
}

/// Maximize the Bernoulli log-likelihood of `y` on design `x` (`n × p`).
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit, GlmError> {
    let p = x.ncols();
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(GlmError::BadOutcome);
    }
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    for it in 1..=MAX_ITER {
        let eta = x * &beta;
        let mu = eta.map(expit);
        let v = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let xtvx = weighted_gram(x, &v);
        let score = x.transpose() * (&yv - &mu);
        let inv = inverse_spd(&xtvx).ok_or(GlmError::Singular)?;
        let step = &inv * score;
        beta += &step;
        if beta.amax() > SEPARATION {
            return Err(GlmError::Separation(beta.amax()));
        }
        if step.amax() < TOL * (1.0 + beta.amax()) {
            let fitted = (x * &beta).map(expit);
            let v = fitted.map(|m| m * (1.0 - m));
            let info = weighted_gram(x, &v);
            let inv_information = inverse_spd(&info).ok_or(GlmError::Singular)?;
            return Ok(LogisticFit { beta, inv_information, fitted, iterations: it });
        }
    }
    Err(GlmError::NoConvergence(MAX_ITER))
}
