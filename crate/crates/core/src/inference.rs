//! Plug-in variance of the stacked moments and of θ̂.
//!
//! The linearization of `M̂(θ₀)` has one independent term per data source:
//!
//! * base sample: `ξ_q = α g + Σ_s A_s (w_s h⁺_s − μ̂⁺_s)` with
//!   `A_s = J^m_{η_s} J^{η_s}_{μ_s}`, covariance `Γ_q`;
//! * trial `s`: `Γ_s = Σ^τ_s + A_s Σ^μ_s A_sᵀ − (Σ^{τμ}_s A_sᵀ + A_s Σ^{μτ}_s)`.
//!
//! `Var(M̂) = Γ_q/n_q + Σ_s Γ_s/n_s`; with `n = n_q + Σ n_s` and
//! `π_· = n/n_·` this is `Ω/n` for `Ω = π_q Γ_q + Σ π_s Γ_s`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggdata::{CovariateSample, MetaDataset, StratumRule, TrialData};
use crate::linalg::{psd_repair, symmetrize, to_rows};
use crate::tilting::TiltFit;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("trial `{trial}`: tilt Hessian E_Q[w h⁺h⁺ᵀ] is singular")]
    SingularTiltHessian { trial: String },
    #[error("trial `{trial}`: missing standard error for {what}")]
    MissingSe { trial: String, what: String },
    #[error("trial `{trial}`: user Σ^τμ block has shape {got:?}, expected {expected:?}")]
    CrossBlockShape { trial: String, got: (usize, usize), expected: (usize, usize) },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Homoscedastic difference-in-means approximations.
    #[default]
    Approximate,
    /// All within-trial effect correlations set to 0.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovarianceConfig {
    pub correlation: CorrelationMode,
    pub include_sigma_mu: bool,
    /// User `Σ^{τμ}` blocks (`J_s × (R_s+1)`, row-major) keyed by trial.
    pub sigma_taumu: BTreeMap<String, Vec<Vec<f64>>>,
    /// Drop the base-sample term (Q known exactly).
    pub treat_q_exact: bool,
    pub clip: f64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig {
            correlation: CorrelationMode::Approximate,
            include_sigma_mu: true,
            sigma_taumu: BTreeMap::new(),
            treat_q_exact: false,
            clip: 0.999,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialCovariance {
    pub trial: String,
    pub n: u64,
    pub sigma_tau: DMatrix<f64>,
    pub sigma_mu: DMatrix<f64>,
    pub sigma_taumu: DMatrix<f64>,
    /// Clipped eigenvalue mass relative to trace, 0 when no repair was needed.
    pub tau_repair: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrialCovariances {
    pub blocks: Vec<TrialCovariance>,
    pub warnings: Vec<String>,
}

fn stratum_probability(rule: &(usize, StratumRule), tilt: &TiltFit, base: &CovariateSample) -> f64 {
    let (k, r) = rule;
    let n = base.n_rows() as f64;
    base.rows().zip(&tilt.weights).filter(|(x, _)| r.contains(x[*k])).map(|(_, w)| w).sum::<f64>() / n
}

fn joint_probability(a: &(usize, StratumRule), b: &(usize, StratumRule), tilt: &TiltFit, base: &CovariateSample) -> f64 {
    let n = base.n_rows() as f64;
    base.rows()
        .zip(&tilt.weights)
        .filter(|(x, _)| a.1.contains(x[a.0]) && b.1.contains(x[b.0]))
        .map(|(_, w)| w)
        .sum::<f64>()
        / n
}

/// Approximate `Σ^τ_s` from reported SEs; returns the PSD-repaired matrix,
/// the relative clipped mass and any homoscedasticity warnings.
pub fn approximate_sigma_tau(
    dataset: &MetaDataset,
    trial: &TrialData,
    tilt: &TiltFit,
    base: &CovariateSample,
    cfg: &CovarianceConfig,
) -> Result<(DMatrix<f64>, f64, Vec<String>), InferenceError> {
    let js = trial.effects.len();
    let mut warnings = Vec::new();
    for e in &trial.effects {
        if !e.se.is_finite() || e.se < 0.0 {
            return Err(InferenceError::MissingSe { trial: trial.id.clone(), what: dataset.effect_label(e) });
        }
    }
    let rules: Vec<Option<(usize, StratumRule)>> =
        trial.effects.iter().map(|e| dataset.stratum_rule(&trial.id, e.target)).collect();
    let probs: Vec<f64> =
        rules.iter().map(|r| r.as_ref().map_or(1.0, |r| stratum_probability(r, tilt, base))).collect();
    let se: Vec<f64> = trial.effects.iter().map(|e| e.se).collect();

    let mut corr = DMatrix::identity(js, js);
    if cfg.correlation == CorrelationMode::Approximate {
        for a in 0..js {
            for b in (a + 1)..js {
                let c = match (&rules[a], &rules[b]) {
                    (None, None) => 1.0,
                    (None, Some(_)) => {
                        if se[a] > 0.0 {
                            probs[b] * se[b] / se[a]
                        } else {
                            0.0
                        }
                    }
                    (Some(_), None) => {
                        if se[b] > 0.0 {
                            probs[a] * se[a] / se[b]
                        } else {
                            0.0
                        }
                    }
                    (Some(ra), Some(rb)) if ra.0 == rb.0 => 0.0,
                    (Some(ra), Some(rb)) => {
                        let pab = joint_probability(ra, rb, tilt, base);
                        let denom = (probs[a] * probs[b]).sqrt();
                        if denom > 0.0 {
                            pab / denom
                        } else {
                            0.0
                        }
                    }
                };
                let c = c.clamp(-cfg.clip, cfg.clip);
                corr[(a, b)] = c;
                corr[(b, a)] = c;
            }
        }
    }

    // homoscedastic prediction se_kl ≈ se_00 / sqrt(P_kl)
    if let Some(m) = trial.effects.iter().position(|e| e.is_marginal()) {
        for (j, e) in trial.effects.iter().enumerate() {
            if j == m || probs[j] <= 0.0 || se[m] <= 0.0 {
                continue;
            }
            let predicted = se[m] / probs[j].sqrt();
            let ratio = se[j] / predicted;
            if !(0.5..=2.0).contains(&ratio) {
                warnings.push(format!(
                    "{}: reported SE {} is {:.2}x the homoscedastic prediction {:.4}; correlation approximations may be poor",
                    dataset.effect_label(e),
                    se[j],
                    ratio,
                    predicted
                ));
            }
        }
    }

    let n = trial.n as f64;
    let mut sigma = DMatrix::zeros(js, js);
    for a in 0..js {
        for b in 0..js {
            sigma[(a, b)] = n * se[a] * se[b] * corr[(a, b)];
        }
    }
    let repair = psd_repair(&sigma);
    if repair.was_repaired() {
        let msg = format!(
            "trial `{}`: Σ^τ projected to the PSD cone (clipped eigenvalue mass {:.3e}, {:.3}% of trace)",
            trial.id,
            repair.clipped_mass,
            100.0 * repair.relative_mass()
        );
        log::info!("{msg}");
        warnings.push(msg);
    }
    let rel = if repair.was_repaired() { repair.relative_mass() } else { 0.0 };
    Ok((repair.matrix, rel, warnings))
}

/// `Σ̂^μ_s = mean_i w_i (h⁺_i − μ̂⁺)(h⁺_i − μ̂⁺)ᵀ`.
pub fn approximate_sigma_mu(tilt: &TiltFit, base: &CovariateSample) -> DMatrix<f64> {
    let h = tilt.h_plus(base);
    let (n, p) = h.shape();
    let mut out = DMatrix::zeros(p, p);
    for i in 0..n {
        let w = tilt.weights[i] / n as f64;
        for a in 0..p {
            let da = h[(i, a)] - tilt.mu_plus[a];
            if da == 0.0 {
                continue;
            }
            for b in a..p {
                out[(a, b)] += w * da * (h[(i, b)] - tilt.mu_plus[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// Within-trial covariance blocks for every trial.
pub fn trial_covariances(
    dataset: &MetaDataset,
    tilts: &[TiltFit],
    base: &CovariateSample,
    cfg: &CovarianceConfig,
) -> Result<TrialCovariances, InferenceError> {
    if tilts.len() != dataset.trials.len() {
        return Err(InferenceError::Dimension(format!("{} tilts for {} trials", tilts.len(), dataset.trials.len())));
    }
    let mut out = TrialCovariances::default();
    for (trial, tilt) in dataset.trials.iter().zip(tilts) {
        let (sigma_tau, tau_repair, warnings) = approximate_sigma_tau(dataset, trial, tilt, base, cfg)?;
        out.warnings.extend(warnings);
        let p = tilt.specs.len() + 1;
        let sigma_mu = if cfg.include_sigma_mu { approximate_sigma_mu(tilt, base) } else { DMatrix::zeros(p, p) };
        let js = trial.effects.len();
        let sigma_taumu = match cfg.sigma_taumu.get(&trial.id) {
            None => DMatrix::zeros(js, p),
            Some(rows) => {
                let m = crate::linalg::from_rows(rows).ok_or_else(|| InferenceError::CrossBlockShape {
                    trial: trial.id.clone(),
                    got: (rows.len(), 0),
                    expected: (js, p),
                })?;
                if m.shape() != (js, p) {
                    return Err(InferenceError::CrossBlockShape {
                        trial: trial.id.clone(),
                        got: m.shape(),
                        expected: (js, p),
                    });
                }
                m
            }
        };
        out.blocks.push(TrialCovariance { trial: trial.id.clone(), n: trial.n, sigma_tau, sigma_mu, sigma_taumu, tau_repair });
    }
    Ok(out)
}

/// Per-source covariance pieces of the moment linearization.
#[derive(Debug, Clone)]
pub struct OmegaParts {
    /// `Γ_q` (zero when Q is treated as exact).
    pub gamma_q: DMatrix<f64>,
    /// `Γ_s`, each `J × J` and supported on trial `s`'s block.
    pub gamma_s: Vec<DMatrix<f64>>,
    pub n_q: f64,
    pub n_s: Vec<f64>,
}

impl OmegaParts {
    pub fn n_total(&self) -> f64 {
        let q = if self.n_q.is_finite() { self.n_q } else { 0.0 };
        q + self.n_s.iter().sum::<f64>()
    }

    /// `Var(M̂) = Γ_q/n_q + Σ Γ_s/n_s`.
    pub fn var_moments(&self) -> DMatrix<f64> {
        let mut v = if self.n_q.is_finite() { &self.gamma_q / self.n_q } else { &self.gamma_q * 0.0 };
        for (g, n) in self.gamma_s.iter().zip(&self.n_s) {
            v += g / *n;
        }
        symmetrize(&mut v);
        v
    }

    /// `Ω = n Var(M̂)`.
    pub fn omega(&self) -> DMatrix<f64> {
        self.var_moments() * self.n_total()
    }
}

/// Assemble `Γ_q` and `Γ_s` at θ.
///
/// `g_alpha` is the `n_q × J` matrix of `α_ij g(X_i; θ)`, `a_blocks[s]` the
/// `J × (R_s+1)` matrices `A_s`, `offsets[s]` the row offset of trial `s`.
pub fn omega_parts(
    g_alpha: &DMatrix<f64>,
    a_blocks: &[DMatrix<f64>],
    h_plus: &[DMatrix<f64>],
    tilts: &[TiltFit],
    covs: &TrialCovariances,
    offsets: &[usize],
    cfg: &CovarianceConfig,
) -> OmegaParts {
    let (n, j) = g_alpha.shape();
    let nf = n as f64;
    let gamma_q = if cfg.treat_q_exact {
        DMatrix::zeros(j, j)
    } else {
        let mut xi = g_alpha.clone();
        for (s, a) in a_blocks.iter().enumerate() {
            let tilt = &tilts[s];
            let h = &h_plus[s];
            let mut centred = DMatrix::zeros(n, h.ncols());
            for i in 0..n {
                for r in 0..h.ncols() {
                    centred[(i, r)] = tilt.weights[i] * h[(i, r)] - tilt.mu_plus[r];
                }
            }
            xi += centred * a.transpose();
        }
        let means: Vec<f64> = xi.column_iter().map(|c| c.sum() / nf).collect();
        for (jdx, m) in means.iter().enumerate() {
            for v in xi.column_mut(jdx).iter_mut() {
                *v -= m;
            }
        }
        let mut g = xi.transpose() * &xi / nf;
        symmetrize(&mut g);
        g
    };
    let mut gamma_s = Vec::with_capacity(covs.blocks.len());
    for (s, block) in covs.blocks.iter().enumerate() {
        let js = block.sigma_tau.nrows();
        let off = offsets[s];
        let a = &a_blocks[s];
        let mut g = a * &block.sigma_mu * a.transpose();
        let cross = {
            let mut full = DMatrix::zeros(j, a.ncols());
            full.view_mut((off, 0), (js, a.ncols())).copy_from(&block.sigma_taumu);
            full * a.transpose()
        };
        g -= &cross + cross.transpose();
        let mut view = g.view_mut((off, off), (js, js));
        view += &block.sigma_tau;
        symmetrize(&mut g);
        gamma_s.push(g);
    }
    OmegaParts {
        gamma_q,
        gamma_s,
        n_q: if cfg.treat_q_exact { f64::INFINITY } else { nf },
        n_s: covs.blocks.iter().map(|b| b.n as f64).collect(),
    }
}

/// Variance summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// `n = n_q + Σ n_s` (n_q omitted when Q is treated as exact).
    pub n_total: f64,
    pub n_q: Option<f64>,
    pub n_s: Vec<f64>,
    /// Sample fractions `n_·/n`.
    pub fraction_q: Option<f64>,
    pub fraction_s: Vec<f64>,
    /// `Ω̂` (`J × J`).
    pub omega: Vec<Vec<f64>>,
    /// Base-sample and per-trial contributions to `Ω̂`; they sum to `omega`.
    pub omega_base: Vec<Vec<f64>>,
    pub omega_trials: Vec<Vec<Vec<f64>>>,
    /// `V̂_θ = J^θ_m Ω̂ (J^θ_m)ᵀ`.
    pub v_theta: Vec<Vec<f64>>,
    /// `Var̂(θ̂) = V̂_θ / n`.
    pub var_theta: Vec<Vec<f64>>,
    /// Share of `tr Var̂(θ̂)` from the base sample and from each trial.
    pub share_base: f64,
    pub share_trials: Vec<f64>,
    /// Relative clipped eigenvalue mass of the final `V̂_θ` repair.
    pub repair_mass: f64,
    pub warnings: Vec<String>,
}

impl VarianceReport {
    pub fn var_theta_matrix(&self) -> DMatrix<f64> {
        crate::linalg::from_rows(&self.var_theta).expect("square matrix")
    }
}

/// Combine the pieces with `J^θ_m` into the reported variance.
pub fn assemble_variance(parts: &OmegaParts, j_theta_m: &DMatrix<f64>, warnings: Vec<String>) -> VarianceReport {
    let q_exact = !parts.n_q.is_finite();
    let n = parts.n_total();
    let base = if q_exact { &parts.gamma_q * 0.0 } else { &parts.gamma_q * (n / parts.n_q) };
    let trials: Vec<DMatrix<f64>> = parts.gamma_s.iter().zip(&parts.n_s).map(|(g, ns)| g * (n / ns)).collect();
    let mut omega = base.clone();
    for t in &trials {
        omega += t;
    }
    symmetrize(&mut omega);
    let sandwich = |m: &DMatrix<f64>| j_theta_m * m * j_theta_m.transpose();
    let mut v = sandwich(&omega);
    symmetrize(&mut v);
    let repair = psd_repair(&v);
    let mut warnings = warnings;
    if repair.was_repaired() {
        let msg = format!("V_θ projected to the PSD cone (clipped mass {:.3}% of trace)", 100.0 * repair.relative_mass());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let v = repair.matrix.clone();
    let total = v.trace();
    let share = |m: &DMatrix<f64>| if total > 0.0 { sandwich(m).trace() / total } else { 0.0 };
    VarianceReport {
        n_total: n,
        n_q: (!q_exact).then_some(parts.n_q),
        n_s: parts.n_s.clone(),
        fraction_q: (!q_exact).then_some(parts.n_q / n),
        fraction_s: parts.n_s.iter().map(|s| s / n).collect(),
        omega: to_rows(&omega),
        omega_base: to_rows(&base),
        omega_trials: trials.iter().map(to_rows).collect(),
        v_theta: to_rows(&v),
        var_theta: to_rows(&(&v / n)),
        share_base: share(&base),
        share_trials: trials.iter().map(share).collect(),
        repair_mass: if repair.was_repaired() { repair.relative_mass() } else { 0.0 },
        warnings,
    }
}

/// Wald 95% interval `ψ̂ ± 1.96·se`.
pub fn wald_ci(estimate: f64, se: f64) -> (f64, f64) {
    (estimate - 1.96 * se, estimate + 1.96 * se)
}
