//! Exponential tilting of a base sample toward reported trial moments, and the
//! working representers built from the tilted weights.
//!
//! For trial `s` with moment functions `h_s` the weights are
//! `w_s(x) = exp(η·h⁺(x))`, `h⁺ = (1, h)`. The tilt solves
//! `mean_i w(X_i) h⁺(X_i) = μ̂⁺` by damped Newton on the convex dual
//! `L(η) = mean exp(η·h⁺) − η·μ̂⁺`, after centering and scaling each `h_r` by
//! its base-sample mean and SD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggdata::{CovariateSample, EffectTarget, MetaDataset, MomentSpec, TrialData};
use crate::linalg::pinv_sym;
use crate::par::{self, Parallelism};

#[derive(Debug, Error)]
pub enum TiltError {
    #[error("trial `{trial}`: infeasible moments, {diagnostic}")]
    InfeasibleMoments { trial: String, diagnostic: String },
    #[error("trial `{trial}`: no convergence after {iterations} iterations (max standardized residual {residual:.3e})")]
    MaxIterations { trial: String, iterations: usize, residual: f64 },
    #[error("trial `{trial}`: no base row falls in reported subgroup `{label}`")]
    EmptyStratum { trial: String, label: String },
    #[error("outcome-scale function b(x) = {value} is not positive at base row {row}")]
    NonpositiveB { row: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty base sample")]
    EmptyBase,
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiltConfig {
    /// Convergence threshold on the max standardized moment residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Backtracking shrink factor.
    pub damping: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Standardized `|η|∞` beyond which the tilt is declared divergent.
    pub max_eta: f64,
}

impl Default for TiltConfig {
    fn default() -> Self {
        TiltConfig { tol: 1e-11, max_iter: 200, damping: 0.5, armijo: 1e-4, max_eta: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltFit {
    pub trial_id: String,
    pub specs: Vec<MomentSpec>,
    /// `μ̂⁺` the tilt was solved for (leading 1).
    pub mu_plus: Vec<f64>,
    /// `η̂` on the raw moment scale, intercept first.
    pub eta: Vec<f64>,
    /// Max-abs residual on standardized moments, intercept included.
    pub residual_norm: f64,
    /// Raw achieved-minus-target residual per component of `h⁺`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Dual objective after each accepted step (starting at η = 0).
    pub objective_trace: Vec<f64>,
    #[serde(skip)]
    pub weights: Vec<f64>,
}

impl TiltFit {
    /// Mean of the weights over the base sample.
    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len().max(1) as f64
    }

    /// `h⁺(X_i)` for every base row, `n_q × (R+1)`.
    pub fn h_plus(&self, base: &CovariateSample) -> DMatrix<f64> {
        h_plus_matrix(&self.specs, base)
    }
}

pub fn h_plus_matrix(specs: &[MomentSpec], base: &CovariateSample) -> DMatrix<f64> {
    let n = base.n_rows();
    let mut h = DMatrix::zeros(n, specs.len() + 1);
    for (i, row) in base.rows().enumerate() {
        h[(i, 0)] = 1.0;
        for (r, s) in specs.iter().enumerate() {
            h[(i, r + 1)] = s.eval(row);
        }
    }
    h
}

/// Weights `exp(η·h⁺)` for an arbitrary `η`.
pub fn tilt_weights(specs: &[MomentSpec], eta: &[f64], base: &CovariateSample) -> Vec<f64> {
    base.rows()
        .map(|row| {
            let lin = eta[0] + specs.iter().zip(&eta[1..]).map(|(s, e)| e * s.eval(row)).sum::<f64>();
            lin.exp()
        })
        .collect()
}

struct Standardized {
    z: DMatrix<f64>,
    target: DVector<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(h: &DMatrix<f64>, mu_plus: &[f64]) -> Standardized {
    let (n, p) = h.shape();
    let mut z = h.clone();
    let mut target = DVector::from_column_slice(mu_plus);
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for r in 1..p {
        let col = h.column(r);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        center[r] = mean;
        scale[r] = sd;
        for i in 0..n {
            z[(i, r)] = (h[(i, r)] - mean) / sd;
        }
        target[r] = (mu_plus[r] - mean) / sd;
    }
    Standardized { z, target, center, scale }
}

fn gradient(z: &DMatrix<f64>, target: &DVector<f64>, w: &[f64]) -> DVector<f64> {
    let nf = w.len() as f64;
    let mut g = -target.clone();
    for (i, wi) in w.iter().enumerate() {
        for (a, ga) in g.iter_mut().enumerate() {
            *ga += wi * z[(i, a)] / nf;
        }
    }
    g
}

fn dual(z: &DMatrix<f64>, target: &DVector<f64>, lambda: &DVector<f64>) -> (f64, Vec<f64>) {
    let lin = z * lambda;
    let w: Vec<f64> = lin.iter().map(|v| v.exp()).collect();
    let mean_w = w.iter().sum::<f64>() / w.len() as f64;
    (mean_w - lambda.dot(target), w)
}

/// Hull position of every moment, used in infeasibility diagnostics.
fn hull_report(specs: &[MomentSpec], h: &DMatrix<f64>, mu_plus: &[f64]) -> (bool, String) {
    let mut outside = false;
    let mut parts = Vec::new();
    for r in 1..h.ncols() {
        let col = h.column(r);
        let lo = col.min();
        let hi = col.max();
        let t = mu_plus[r];
        let degenerate = lo == hi;
        let bad = if degenerate { (t - lo).abs() > 1e-12 * lo.abs().max(1.0) } else { t <= lo || t >= hi };
        outside |= bad;
        parts.push(format!(
            "{:?}: target {t} vs base range [{lo}, {hi}]{}",
            specs[r - 1],
            if bad { " (outside)" } else { "" }
        ));
    }
    (outside, parts.join("; "))
}

/// Solve the tilt for one set of moment functions.
pub fn solve_tilt(
    base: &CovariateSample,
    specs: &[MomentSpec],
    mu_hat_plus: &[f64],
    cfg: &TiltConfig,
) -> Result<TiltFit, TiltError> {
    solve_named(String::new(), base, specs, mu_hat_plus, cfg)
}

/// Solve the tilt toward one trial's reported moments.
pub fn solve_trial_tilt(trial: &TrialData, base: &CovariateSample, cfg: &TiltConfig) -> Result<TiltFit, TiltError> {
    solve_named(trial.id.clone(), base, &trial.moment_specs(), &trial.mu_plus(), cfg)
}

/// Solve every trial's tilt, independently and in trial order.
pub fn solve_all_tilts(
    dataset: &MetaDataset,
    base: &CovariateSample,
    cfg: &TiltConfig,
    parallelism: Parallelism,
) -> Result<Vec<TiltFit>, TiltError> {
    par::map(&dataset.trials, parallelism, |t| solve_trial_tilt(t, base, cfg)).into_iter().collect()
}

fn solve_named(
    trial: String,
    base: &CovariateSample,
    specs: &[MomentSpec],
    mu_plus: &[f64],
    cfg: &TiltConfig,
) -> Result<TiltFit, TiltError> {
    let n = base.n_rows();
    if n == 0 {
        return Err(TiltError::EmptyBase);
    }
    if mu_plus.len() != specs.len() + 1 {
        return Err(TiltError::Dimension(format!("{} moment specs but {} targets", specs.len(), mu_plus.len())));
    }
    if mu_plus[0] != 1.0 {
        return Err(TiltError::Dimension("leading target component must be 1".into()));
    }
    let h = h_plus_matrix(specs, base);
    let (outside, diag) = hull_report(specs, &h, mu_plus);
    if outside {
        return Err(TiltError::InfeasibleMoments { trial, diagnostic: diag });
    }
    let st = standardize(&h, mu_plus);
    let p = h.ncols();
    let nf = n as f64;

    let mut lambda = DVector::zeros(p);
    let (mut obj, mut w) = dual(&st.z, &st.target, &lambda);
    let mut trace = vec![obj];
    let mut iterations = 0;
    let mut converged = false;
    let mut resid_max;
    loop {
        // gradient and Hessian of the dual
        let mut grad = -st.target.clone();
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let zi = st.z.row(i);
            let wi = w[i] / nf;
            for a in 0..p {
                grad[a] += wi * zi[a];
                let wa = wi * zi[a];
                for b in a..p {
                    hess[(a, b)] += wa * zi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        resid_max = grad.amax();
        if resid_max <= cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;
        let step = -pinv_sym(&hess, 1e-13) * &grad;
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &lambda + t * &step;
            let (cobj, cw) = dual(&st.z, &st.target, &cand);
            // near the optimum dual decreases drop below rounding; use the gradient there
            let flat = (cobj - obj).abs() <= 1e-13 * obj.abs().max(1.0);
            let sufficient = cobj <= obj + cfg.armijo * t * slope
                || (flat && gradient(&st.z, &st.target, &cw).amax() < resid_max);
            if cobj.is_finite() && sufficient {
                lambda = cand;
                obj = cobj;
                w = cw;
                accepted = true;
                break;
            }
            t *= cfg.damping;
        }
        if !accepted {
            // no decrease possible at machine precision
            break;
        }
        trace.push(obj);
        if lambda.amax() > cfg.max_eta {
            return Err(TiltError::InfeasibleMoments {
                trial,
                diagnostic: format!("tilt diverges (|η|∞ = {:.1} on the standardized scale); {diag}", lambda.amax()),
            });
        }
    }
    if !converged {
        if resid_max > 1e-6 {
            let mut diagnostic = format!("Newton stalled with standardized residual {resid_max:.3e}; {diag}");
            if lambda.amax() > 0.5 * cfg.max_eta {
                diagnostic = format!("tilt drifts toward the hull boundary; {diagnostic}");
                return Err(TiltError::InfeasibleMoments { trial, diagnostic });
            }
            if iterations < cfg.max_iter {
                return Err(TiltError::InfeasibleMoments { trial, diagnostic });
            }
        }
        if resid_max > cfg.tol.max(1e-9) {
            return Err(TiltError::MaxIterations { trial, iterations, residual: resid_max });
        }
    }

    // back to the raw scale: λ·z⁺ = η·h⁺
    let mut eta = vec![0.0; p];
    eta[0] = lambda[0];
    for r in 1..p {
        eta[r] = lambda[r] / st.scale[r];
        eta[0] -= lambda[r] * st.center[r] / st.scale[r];
    }
    let mut residuals = vec![0.0; p];
    for i in 0..n {
        for r in 0..p {
            residuals[r] += w[i] * h[(i, r)] / nf;
        }
    }
    for r in 0..p {
        residuals[r] -= mu_plus[r];
    }
    Ok(TiltFit {
        trial_id: trial,
        specs: specs.to_vec(),
        mu_plus: mu_plus.to_vec(),
        eta,
        residual_norm: resid_max,
        residuals,
        iterations,
        objective_trace: trace,
        weights: w,
    })
}

/// How a representer column is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnScaling {
    /// `α = w` (additive marginal effect; `E_Q[w] = 1` at the solution).
    Raw,
    /// `α = w c / mean(w c)` with `c` the subgroup indicator times `b`.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresenterColumn {
    pub trial: String,
    pub trial_index: usize,
    pub target: EffectTarget,
    pub label: String,
    pub scaling: ColumnScaling,
}

/// `n_q × J` matrix of representer values; column order matches the stacked τ̂.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresenterMatrix {
    pub values: DMatrix<f64>,
    pub columns: Vec<RepresenterColumn>,
}

impl RepresenterMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.values.nrows() as f64;
        self.values.column_iter().map(|c| c.sum() / n).collect()
    }

    /// `∂α_j(X_i)/∂η_s` as an `n_q × (R_s+1)` matrix for a column `j` of trial `s`.
    pub fn eta_derivative(&self, j: usize, h_plus: &DMatrix<f64>) -> DMatrix<f64> {
        let alpha = self.values.column(j);
        let (n, p) = h_plus.shape();
        let mut out = DMatrix::zeros(n, p);
        match self.columns[j].scaling {
            ColumnScaling::Raw => {
                for i in 0..n {
                    for r in 0..p {
                        out[(i, r)] = alpha[i] * h_plus[(i, r)];
                    }
                }
            }
            ColumnScaling::Normalized => {
                let nf = n as f64;
                let mut centre = vec![0.0; p];
                for i in 0..n {
                    for r in 0..p {
                        centre[r] += alpha[i] * h_plus[(i, r)] / nf;
                    }
                }
                for i in 0..n {
                    for r in 0..p {
                        out[(i, r)] = alpha[i] * (h_plus[(i, r)] - centre[r]);
                    }
                }
            }
        }
        out
    }
}

fn check_alignment(tilts: &[TiltFit], base: &CovariateSample, dataset: &MetaDataset) -> Result<(), TiltError> {
    if tilts.len() != dataset.trials.len() {
        return Err(TiltError::Dimension(format!("{} tilts for {} trials", tilts.len(), dataset.trials.len())));
    }
    for (t, d) in tilts.iter().zip(&dataset.trials) {
        if t.trial_id != d.id {
            return Err(TiltError::Dimension(format!("tilt `{}` does not match trial `{}`", t.trial_id, d.id)));
        }
        if t.weights.len() != base.n_rows() {
            return Err(TiltError::Dimension(format!(
                "tilt `{}` carries {} weights for {} base rows",
                t.trial_id,
                t.weights.len(),
                base.n_rows()
            )));
        }
    }
    Ok(())
}

fn build(
    tilts: &[TiltFit],
    base: &CovariateSample,
    dataset: &MetaDataset,
    b: Option<&[f64]>,
) -> Result<RepresenterMatrix, TiltError> {
    check_alignment(tilts, base, dataset)?;
    let n = base.n_rows();
    let j_total = dataset.total_effects();
    let mut values = DMatrix::zeros(n, j_total);
    let mut columns = Vec::with_capacity(j_total);
    let mut j = 0;
    for (s, (trial, tilt)) in dataset.trials.iter().zip(tilts).enumerate() {
        for e in &trial.effects {
            let label = dataset.effect_label(e);
            let rule = dataset.stratum_rule(&trial.id, e.target);
            let scaling = if rule.is_none() && b.is_none() { ColumnScaling::Raw } else { ColumnScaling::Normalized };
            let mut denom = 0.0;
            for (i, row) in base.rows().enumerate() {
                let ind = match &rule {
                    None => true,
                    Some((k, r)) => r.contains(row[*k]),
                };
                let v = if ind { tilt.weights[i] * b.map_or(1.0, |b| b[i]) } else { 0.0 };
                values[(i, j)] = v;
                denom += v;
            }
            if scaling == ColumnScaling::Normalized {
                denom /= n as f64;
                if !(denom > 0.0) {
                    return Err(TiltError::EmptyStratum { trial: trial.id.clone(), label });
                }
                values.column_mut(j).scale_mut(1.0 / denom);
            }
            columns.push(RepresenterColumn { trial: trial.id.clone(), trial_index: s, target: e.target, label, scaling });
            j += 1;
        }
    }
    Ok(RepresenterMatrix { values, columns })
}

/// Additive-scale representers for every reported effect.
pub fn evaluate_representers(
    tilts: &[TiltFit],
    base: &CovariateSample,
    dataset: &MetaDataset,
) -> Result<RepresenterMatrix, TiltError> {
    build(tilts, base, dataset, None)
}

/// Relative-scale representers `w b I / mean(w b I)`, with `b` the control-arm
/// outcome function evaluated on each base row.
pub fn evaluate_relative_representers(
    tilts: &[TiltFit],
    base: &CovariateSample,
    dataset: &MetaDataset,
    b: &dyn Fn(&[f64]) -> f64,
) -> Result<RepresenterMatrix, TiltError> {
    let vals = base_b_values(base, b)?;
    build(tilts, base, dataset, Some(&vals))
}

/// Evaluate `b` on every base row, rejecting nonpositive values.
pub fn base_b_values(base: &CovariateSample, b: &dyn Fn(&[f64]) -> f64) -> Result<Vec<f64>, TiltError> {
    base.rows()
        .enumerate()
        .map(|(row, x)| {
            let value = b(x);
            if value > 0.0 && value.is_finite() {
                Ok(value)
            } else {
                Err(TiltError::NonpositiveB { row, value })
            }
        })
        .collect()
}
