//! Stacked moment system and GMM fit of the CATE parameter.
//!
//! `M̂(θ) = mean_i α(X_i) g(X_i; θ) − τ̂` and `θ̂ = argmin M̂ᵀ W M̂`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggdata::{CovariateSample, CovariateSchema, MetaDataset};
use crate::cate::{CateError, CateModel, CateSpec};
use crate::inference::{self, CovarianceConfig, InferenceError, OmegaParts, TrialCovariances, VarianceReport};
use crate::linalg::{inverse_spd, pinv_sym, quad_form, standardized_singular_values, sym_condition_ratio, to_rows};
use crate::par::Parallelism;
use crate::tilting::{self, RepresenterMatrix, TiltConfig, TiltFit};

/// Smallest allowed ratio of standardized singular values of `Ĵ^m_θ`.
pub const RANK_THRESHOLD: f64 = 1e-7;
/// First-order-condition tolerance of the iterative solver.
pub const FOC_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("{j} moments cannot identify {d} parameters (need J ≥ d)")]
    Underidentified { j: usize, d: usize },
    #[error("moment Jacobian is rank deficient (singular value ratio {ratio:.3e} < {threshold:.0e})")]
    RankDeficient { ratio: f64, threshold: f64 },
    #[error("no convergence after {iterations} iterations (first-order residual {foc:.3e})")]
    NoConvergence { iterations: usize, foc: f64 },
    #[error("weighting matrix is not positive definite")]
    BadWeight,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] CateError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

impl GmmError {
    pub fn is_input_error(&self) -> bool {
        matches!(self, GmmError::Underidentified { .. } | GmmError::Model(_) | GmmError::Dimension(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Identity,
    #[default]
    InverseSe2,
    TwoStep,
}

impl std::str::FromStr for Weighting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "identity" => Ok(Weighting::Identity),
            "inverse-se2" | "inverse-se²" => Ok(Weighting::InverseSe2),
            "two-step" => Ok(Weighting::TwoStep),
            _ => Err(format!("unknown weighting `{s}` (identity, inverse-se2, two-step)")),
        }
    }
}

/// Moment system ready for fitting.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub model: CateSpec,
    pub dataset: MetaDataset,
    pub base: CovariateSample,
    pub tilts: Vec<TiltFit>,
    pub representers: RepresenterMatrix,
    pub tau_hat: DVector<f64>,
    pub se: Vec<f64>,
    pub covs: TrialCovariances,
    pub cov_config: CovarianceConfig,
    /// Time stratum of each moment.
    pub column_strata: Vec<usize>,
    pub offsets: Vec<usize>,
    /// `h⁺` on the base sample, per trial.
    pub h_plus: Vec<DMatrix<f64>>,
    /// Constant `Ĵ^m_θ` for linear models.
    linear_jacobian: Option<DMatrix<f64>>,
}

impl MomentSystem {
    pub fn new(
        model: CateSpec,
        dataset: MetaDataset,
        base: CovariateSample,
        tilts: Vec<TiltFit>,
        representers: RepresenterMatrix,
        cov_config: CovarianceConfig,
    ) -> Result<Self, GmmError> {
        let j = dataset.total_effects();
        let d = model.dim();
        if representers.n_cols() != j || representers.n_rows() != base.n_rows() {
            return Err(GmmError::Dimension(format!(
                "representers are {}×{}, expected {}×{j}",
                representers.n_rows(),
                representers.n_cols(),
                base.n_rows()
            )));
        }
        if j < d {
            return Err(GmmError::Underidentified { j, d });
        }
        let column_strata = representers
            .columns
            .iter()
            .map(|c| model.stratum_for_trial(&c.trial).ok_or_else(|| CateError::UnknownTrial(c.trial.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let covs = inference::trial_covariances(&dataset, &tilts, &base, &cov_config)?;
        let h_plus = tilts.iter().map(|t| t.h_plus(&base)).collect();
        let mut sys = MomentSystem {
            tau_hat: DVector::from_vec(dataset.tau_hat()),
            se: dataset.standard_errors(),
            offsets: dataset.block_offsets(),
            model,
            dataset,
            base,
            tilts,
            representers,
            covs,
            cov_config,
            column_strata,
            h_plus,
            linear_jacobian: None,
        };
        if sys.model.is_linear() {
            let zero = vec![0.0; d];
            sys.linear_jacobian = Some(sys.jacobian_theta(&zero));
        }
        Ok(sys)
    }

    pub fn n_moments(&self) -> usize {
        self.tau_hat.len()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn labels(&self) -> Vec<String> {
        self.representers.columns.iter().map(|c| c.label.clone()).collect()
    }

    fn strata_used(&self) -> Vec<usize> {
        let mut s = self.column_strata.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `g(X_i; θ)` on the base sample for each stratum index.
    fn g_by_stratum(&self, theta: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; self.model.n_strata().max(1)];
        for t in self.strata_used() {
            out[t] = Some(self.base.rows().map(|x| self.model.evaluate(theta, x, t)).collect());
        }
        out
    }

    /// `α_ij g(X_i; θ)`, `n_q × J`.
    pub fn g_alpha(&self, theta: &[f64]) -> DMatrix<f64> {
        let g = self.g_by_stratum(theta);
        let mut out = self.representers.values.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let gs = g[self.column_strata[j]].as_ref().expect("stratum evaluated");
            for (v, gi) in col.iter_mut().zip(gs) {
                *v *= gi;
            }
        }
        out
    }

    /// `M̂(θ)`.
    pub fn moments(&self, theta: &[f64]) -> DVector<f64> {
        let n = self.base.n_rows() as f64;
        if let Some(jac) = &self.linear_jacobian {
            return jac * DVector::from_column_slice(theta) - &self.tau_hat;
        }
        let ga = self.g_alpha(theta);
        let means = DVector::from_iterator(ga.ncols(), ga.column_iter().map(|c| c.sum() / n));
        means - &self.tau_hat
    }

    /// `Ĵ^m_θ(θ) = mean_i α_i ∇_θ g(X_i; θ)ᵀ`, `J × d`.
    pub fn jacobian_theta(&self, theta: &[f64]) -> DMatrix<f64> {
        if let Some(jac) = &self.linear_jacobian {
            return jac.clone();
        }
        let n = self.base.n_rows();
        let d = self.dim();
        let mut out = DMatrix::zeros(self.n_moments(), d);
        let mut grad = vec![0.0; d];
        for t in self.strata_used() {
            let mut phi = DMatrix::zeros(n, d);
            for (i, x) in self.base.rows().enumerate() {
                self.model.gradient(theta, x, t, &mut grad);
                for (k, g) in grad.iter().enumerate() {
                    phi[(i, k)] = *g;
                }
            }
            for j in (0..self.n_moments()).filter(|&j| self.column_strata[j] == t) {
                let row = self.representers.values.column(j).transpose() * &phi / n as f64;
                out.row_mut(j).copy_from(&row);
            }
        }
        out
    }

    /// Diagonal inverse-squared-SE weights; zero SEs take the smallest positive SE.
    pub fn inverse_se2_weight(&self) -> DMatrix<f64> {
        let floor = self.se.iter().cloned().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
        let floor = if floor.is_finite() { floor } else { 1.0 };
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.se.len(),
            self.se.iter().map(|s| 1.0 / s.max(floor).powi(2)),
        ))
    }
}

/// Everything needed to build a [`MomentSystem`] from data.
#[derive(Debug, Clone, Default)]
pub struct SystemOptions {
    pub tilt: TiltConfig,
    pub covariance: CovarianceConfig,
    pub parallelism: Parallelism,
}

/// Solve tilts, build representers and assemble the system.
pub fn build_system(
    model: CateSpec,
    dataset: MetaDataset,
    base: CovariateSample,
    opts: &SystemOptions,
    relative_b: Option<&dyn Fn(&[f64]) -> f64>,
) -> crate::Result<MomentSystem> {
    let tilts = tilting::solve_all_tilts(&dataset, &base, &opts.tilt, opts.parallelism)?;
    let reps = match relative_b {
        None => tilting::evaluate_representers(&tilts, &base, &dataset)?,
        Some(b) => tilting::evaluate_relative_representers(&tilts, &base, &dataset, b)?,
    };
    Ok(MomentSystem::new(model, dataset, base, tilts, reps, opts.covariance.clone())?)
}

/// `M̂(θ)` as a plain vector.
pub fn stack_moments(system: &MomentSystem, theta: &[f64]) -> Result<Vec<f64>, GmmError> {
    system.model.check_theta(theta)?;
    Ok(system.moments(theta).iter().cloned().collect())
}

/// Jacobian blocks at θ̂.
#[derive(Debug, Clone)]
pub struct JacobianSet {
    pub j_m_theta: DMatrix<f64>,
    pub j_theta_m: DMatrix<f64>,
    /// `J × (R_s+1)` per trial.
    pub j_m_eta: Vec<DMatrix<f64>>,
    /// `(R_s+1) × (R_s+1)` per trial.
    pub j_eta_mu: Vec<DMatrix<f64>>,
    /// `J^m_{τ_s}` is `−I` on trial `s`'s rows; stored as (offset, size).
    pub j_m_tau_blocks: Vec<(usize, usize)>,
    /// Filled by the estimands module.
    pub j_psi_theta: Option<DVector<f64>>,
}

impl JacobianSet {
    /// `A_s = J^m_{η_s} J^{η_s}_{μ_s}`.
    pub fn a_blocks(&self) -> Vec<DMatrix<f64>> {
        self.j_m_eta.iter().zip(&self.j_eta_mu).map(|(a, b)| a * b).collect()
    }

    /// Dense `J^m_{τ_s}` (`J × J_s`).
    pub fn j_m_tau(&self, s: usize, j_total: usize) -> DMatrix<f64> {
        let (off, size) = self.j_m_tau_blocks[s];
        let mut m = DMatrix::zeros(j_total, size);
        for k in 0..size {
            m[(off + k, k)] = -1.0;
        }
        m
    }
}

/// `J^m_{η_s}` and `J^{η_s}_{μ_s}` at θ.
pub fn eta_jacobians(
    system: &MomentSystem,
    theta: &[f64],
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), GmmError> {
    let n = system.base.n_rows() as f64;
    let g = system.g_by_stratum(theta);
    let j_total = system.n_moments();
    let mut j_m_eta = Vec::with_capacity(system.tilts.len());
    let mut j_eta_mu = Vec::with_capacity(system.tilts.len());
    for (s, tilt) in system.tilts.iter().enumerate() {
        let h = &system.h_plus[s];
        let p = h.ncols();
        let mut block = DMatrix::zeros(j_total, p);
        for j in (0..j_total).filter(|&j| system.representers.columns[j].trial_index == s) {
            let deriv = system.representers.eta_derivative(j, h);
            let gs = g[system.column_strata[j]].as_ref().expect("stratum evaluated");
            let gv = DVector::from_column_slice(gs);
            let row = gv.transpose() * deriv / n;
            block.row_mut(j).copy_from(&row);
        }
        j_m_eta.push(block);

        let mut hess = DMatrix::zeros(p, p);
        for i in 0..h.nrows() {
            let w = tilt.weights[i] / n;
            for a in 0..p {
                for b in 0..p {
                    hess[(a, b)] += w * h[(i, a)] * h[(i, b)];
                }
            }
        }
        let inv = inverse_spd(&hess).ok_or_else(|| InferenceError::SingularTiltHessian { trial: tilt.trial_id.clone() })?;
        j_eta_mu.push(-inv);
    }
    Ok((j_m_eta, j_eta_mu))
}

/// `J^θ_m = −(GᵀWG)⁻¹GᵀW`.
pub fn j_theta_m(g: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>, GmmError> {
    let gtw = g.transpose() * w;
    let a = &gtw * g;
    let inv = inverse_spd(&a).ok_or(GmmError::RankDeficient { ratio: sym_condition_ratio(&a), threshold: RANK_THRESHOLD })?;
    Ok(-(inv * gtw))
}

pub fn compute_jacobians(system: &MomentSystem, theta: &[f64], w: &DMatrix<f64>) -> Result<JacobianSet, GmmError> {
    system.model.check_theta(theta)?;
    let j_m_theta = system.jacobian_theta(theta);
    let j_theta_m = j_theta_m(&j_m_theta, w)?;
    let (j_m_eta, j_eta_mu) = eta_jacobians(system, theta)?;
    let j_m_tau_blocks =
        system.offsets.iter().zip(&system.dataset.trials).map(|(o, t)| (*o, t.effects.len())).collect();
    Ok(JacobianSet { j_m_theta, j_theta_m, j_m_eta, j_eta_mu, j_m_tau_blocks, j_psi_theta: None })
}

/// Rank diagnostic of `Ĵ^m_θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub singular_values: Vec<f64>,
    pub ratio: f64,
    pub threshold: f64,
}

pub fn rank_check(j_m_theta: &DMatrix<f64>) -> Result<RankDiagnostic, GmmError> {
    let sv = standardized_singular_values(j_m_theta);
    let max = sv.first().cloned().unwrap_or(0.0);
    let min = sv.last().cloned().unwrap_or(0.0);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if sv.len() < j_m_theta.ncols() || ratio < RANK_THRESHOLD {
        return Err(GmmError::RankDeficient { ratio, threshold: RANK_THRESHOLD });
    }
    Ok(RankDiagnostic { singular_values: sv, ratio, threshold: RANK_THRESHOLD })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub weighting: Weighting,
    /// Use the iterative solver even for linear models.
    pub force_iterative: bool,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Starting point of the iterative solver; replaces the linearized start.
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { weighting: Weighting::InverseSe2, force_iterative: false, max_iter: 500, n_starts: 5, seed: 0, start: None }
    }
}

/// Fitted CATE with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateFit {
    pub model: CateSpec,
    pub schema: CovariateSchema,
    pub term_names: Vec<String>,
    pub trials: Vec<String>,
    pub theta: Vec<f64>,
    /// `Var̂(θ̂)`.
    pub var_theta: Vec<Vec<f64>>,
    pub weighting: Weighting,
    /// Weighting actually used in the final step (after any fallback).
    pub weighting_used: Weighting,
    pub weight_matrix: Vec<Vec<f64>>,
    pub moment_labels: Vec<String>,
    pub moment_residuals: Vec<f64>,
    pub j_statistic: Option<f64>,
    pub j_df: usize,
    pub rank: RankDiagnostic,
    pub first_order: f64,
    pub iterations: usize,
    pub tilts: Vec<TiltSummary>,
    pub variance: VarianceReport,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSummary {
    pub trial: String,
    pub eta: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl CateFit {
    pub fn var_theta_matrix(&self) -> DMatrix<f64> {
        crate::linalg::from_rows(&self.var_theta).expect("square matrix")
    }

    pub fn se_theta(&self) -> Vec<f64> {
        (0..self.theta.len()).map(|k| self.var_theta[k][k].max(0.0).sqrt()).collect()
    }
}

struct Solution {
    theta: Vec<f64>,
    iterations: usize,
    foc: f64,
}

/// Cholesky factor `L` with `W = LᵀL`.
fn weight_root(w: &DMatrix<f64>) -> Result<DMatrix<f64>, GmmError> {
    let mut sym = w.clone();
    crate::linalg::symmetrize(&mut sym);
    let chol = sym.cholesky().ok_or(GmmError::BadWeight)?;
    Ok(chol.l().transpose())
}

fn closed_form(system: &MomentSystem, l: &DMatrix<f64>) -> Result<Solution, GmmError> {
    let g = system.jacobian_theta(&vec![0.0; system.dim()]);
    let a = l * &g;
    let b = l * &system.tau_hat;
    let svd = a.svd(true, true);
    let theta = svd.solve(&b, 1e-300).map_err(|e| GmmError::Dimension(e.to_string()))?;
    let theta: Vec<f64> = theta.iter().cloned().collect();
    let foc = first_order(system, l, &theta);
    Ok(Solution { theta, iterations: 0, foc })
}

/// Scale-free first-order residual: largest cosine between a column of
/// `L Ĵ^m_θ` and the weighted residual `L M̂`.
fn first_order(system: &MomentSystem, l: &DMatrix<f64>, theta: &[f64]) -> f64 {
    let r = l * system.moments(theta);
    let jr = l * system.jacobian_theta(theta);
    let grad = jr.transpose() * &r;
    let rn = r.norm().max(1.0);
    grad.iter()
        .zip(jr.column_iter())
        .map(|(g, c)| {
            let cn = c.norm();
            if cn > 0.0 {
                g.abs() / (cn * rn)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

fn objective(system: &MomentSystem, l: &DMatrix<f64>, theta: &[f64]) -> f64 {
    let r = l * system.moments(theta);
    0.5 * r.norm_squared()
}

/// Levenberg-damped Gauss–Newton on `½‖L M̂(θ)‖²`.
fn levenberg(system: &MomentSystem, l: &DMatrix<f64>, start: &[f64], max_iter: usize) -> Solution {
    let d = start.len();
    let mut theta = DVector::from_column_slice(start);
    let mut obj = objective(system, l, theta.as_slice());
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < max_iter {
        let r = l * system.moments(theta.as_slice());
        let jr = l * system.jacobian_theta(theta.as_slice());
        let jtj = jr.transpose() * &jr;
        let grad = jr.transpose() * &r;
        if first_order(system, l, theta.as_slice()) <= 1e-12 {
            break;
        }
        iterations += 1;
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..d {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = match a.clone().cholesky() {
                Some(c) => c.solve(&(-&grad)),
                None => -pinv_sym(&a, 1e-14) * &grad,
            };
            let cand = &theta + &step;
            let cobj = objective(system, l, cand.as_slice());
            if cobj.is_finite() && cobj <= obj {
                let small = step.norm() <= 1e-15 * (theta.norm() + 1e-15);
                theta = cand;
                obj = cobj;
                lambda = (lambda / 3.0).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let foc = first_order(system, l, theta.as_slice());
    Solution { theta: theta.iter().cloned().collect(), iterations, foc }
}

fn iterative(system: &MomentSystem, l: &DMatrix<f64>, opts: &FitOptions) -> Result<Solution, GmmError> {
    let start = match &opts.start {
        Some(s) => {
            system.model.check_theta(s)?;
            s.clone()
        }
        None => linearized_start(system, l),
    };
    let mut best = levenberg(system, l, &start, opts.max_iter);
    let mut best_obj = objective(system, l, &best.theta);
    if !system.model.is_linear() && opts.n_starts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.n_starts {
            let init: Vec<f64> = start
                .iter()
                .map(|&s| {
                    let sd = 0.5 * s.abs().max(0.1);
                    s + Normal::new(0.0, sd).expect("positive sd").sample(&mut rng)
                })
                .collect();
            let cand = levenberg(system, l, &init, opts.max_iter);
            let obj = objective(system, l, &cand.theta);
            if obj < best_obj {
                best_obj = obj;
                best = cand;
            }
        }
    }
    if !(best.foc <= FOC_TOL) {
        return Err(GmmError::NoConvergence { iterations: best.iterations, foc: best.foc });
    }
    Ok(best)
}

/// Minimizer of the objective linearized at the model's reference point.
fn linearized_start(system: &MomentSystem, l: &DMatrix<f64>) -> Vec<f64> {
    let reference = system.model.reference_theta();
    // M(θ) ≈ M(θ₀) + G₀(θ − θ₀)
    let a = l * system.jacobian_theta(&reference);
    let b = -(l * system.moments(&reference));
    let svd = a.svd(true, true);
    let cutoff = 1e-10 * svd.singular_values.max();
    svd.solve(&b, cutoff)
        .map(|v| v.iter().zip(&reference).map(|(s, r)| s + r).collect())
        .unwrap_or(reference)
}

fn solve(system: &MomentSystem, w: &DMatrix<f64>, opts: &FitOptions) -> Result<Solution, GmmError> {
    let l = weight_root(w)?;
    if system.model.is_linear() && !opts.force_iterative {
        closed_form(system, &l)
    } else {
        iterative(system, &l, opts)
    }
}

/// Covariance pieces of `M̂` at θ.
pub fn omega_at(system: &MomentSystem, theta: &[f64]) -> Result<OmegaParts, GmmError> {
    let (j_m_eta, j_eta_mu) = eta_jacobians(system, theta)?;
    let a: Vec<DMatrix<f64>> = j_m_eta.iter().zip(&j_eta_mu).map(|(x, y)| x * y).collect();
    Ok(inference::omega_parts(
        &system.g_alpha(theta),
        &a,
        &system.h_plus,
        &system.tilts,
        &system.covs,
        &system.offsets,
        &system.cov_config,
    ))
}

/// Second-step weight `Ω̂⁻¹` (ridged when near-singular); `None` if singular.
fn optimal_weight(var_m: &DMatrix<f64>, warnings: &mut Vec<String>) -> Option<DMatrix<f64>> {
    let j = var_m.nrows();
    let mut m = var_m.clone();
    if sym_condition_ratio(&m) < 1e-12 {
        let ridge = 1e-8 * m.trace() / j as f64;
        if !(ridge > 0.0) {
            return None;
        }
        for k in 0..j {
            m[(k, k)] += ridge;
        }
        warnings.push(format!("Ω̂ near-singular; ridge {ridge:.3e} added before inversion"));
    }
    inverse_spd(&m)
}

/// Fit θ by GMM.
pub fn fit(system: &MomentSystem, opts: &FitOptions) -> Result<CateFit, GmmError> {
    let d = system.dim();
    let j = system.n_moments();
    let mut warnings: Vec<String> = system.covs.warnings.clone();
    warnings.extend(system.dataset.warnings.iter().cloned());

    let start = vec![0.0; d];
    let initial_rank = if system.model.is_linear() { Some(rank_check(&system.jacobian_theta(&start))?) } else { None };

    let first_w = match opts.weighting {
        Weighting::Identity => DMatrix::identity(j, j),
        Weighting::InverseSe2 | Weighting::TwoStep => system.inverse_se2_weight(),
    };
    let mut sol = solve(system, &first_w, opts)?;
    let mut w = first_w;
    let mut used = match opts.weighting {
        Weighting::Identity => Weighting::Identity,
        _ => Weighting::InverseSe2,
    };
    let mut iterations = sol.iterations;
    if opts.weighting == Weighting::TwoStep {
        let var_m = omega_at(system, &sol.theta)?.var_moments();
        match optimal_weight(&var_m, &mut warnings) {
            Some(w2) => {
                // rescale for conditioning; the argmin is scale-invariant
                let scale = w2.diagonal().iter().cloned().fold(0.0, f64::max);
                let w2 = if scale > 0.0 { w2 / scale } else { w2 };
                sol = solve(system, &w2, opts)?;
                iterations += sol.iterations;
                w = w2;
                used = Weighting::TwoStep;
            }
            None => {
                let msg = "Ω̂ is singular; second step skipped, inverse-se² weighting kept".to_string();
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let theta = sol.theta;
    let jac = compute_jacobians(system, &theta, &w)?;
    let rank = match initial_rank {
        Some(r) => r,
        None => rank_check(&jac.j_m_theta)?,
    };
    let parts = omega_at(system, &theta)?;
    let resid = system.moments(&theta);
    let (j_statistic, j_df) = if j > d {
        let v = parts.var_moments();
        let inv = pinv_sym(&v, 1e-12);
        (Some(quad_form(&resid, &inv).max(0.0)), j - d)
    } else {
        (None, 0)
    };
    let variance = inference::assemble_variance(&parts, &jac.j_theta_m, Vec::new());
    warnings.extend(variance.warnings.iter().cloned());

    Ok(CateFit {
        term_names: system.model.term_names(),
        trials: system.dataset.trial_ids(),
        model: system.model.clone(),
        schema: system.dataset.schema.clone(),
        var_theta: variance.var_theta.clone(),
        theta,
        weighting: opts.weighting,
        weighting_used: used,
        weight_matrix: to_rows(&w),
        moment_labels: system.labels(),
        moment_residuals: resid.iter().cloned().collect(),
        j_statistic,
        j_df,
        rank,
        first_order: sol.foc,
        iterations,
        tilts: system
            .tilts
            .iter()
            .map(|t| TiltSummary {
                trial: t.trial_id.clone(),
                eta: t.eta.clone(),
                residual_norm: t.residual_norm,
                iterations: t.iterations,
            })
            .collect(),
        variance,
        warnings,
    })
}
