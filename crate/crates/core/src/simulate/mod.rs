//! Simulation harness: data-generating process, comparator estimators,
//! performance metrics and the scenario catalog.

mod comparators;
mod dgp;
mod study;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggdata::DataError;
use crate::glm::GlmError;
use crate::synthpop::SynthError;

pub use comparators::{
    ipd_gformula, meta_random_effects, meta_regression, reml_log_likelihood, MetaRegression, RandomEffects,
};
pub use dgp::{run_dgp, DgpOutput, IndividualData, COVARIATE_NAMES};
pub use study::{
    rep_seed, run_replication, run_study, write_metrics_csv, Method, MetricsRow, RepOutcome, StudyConfig, FAILURE_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario {id}: {reason}")]
    InvalidScenario { id: u32, reason: String },
    #[error("unknown scenario set `{0}` (expected 5trial, 1trial or all)")]
    UnknownScenarioSet(String),
    #[error("scenario catalog: {0}")]
    Catalog(String),
    #[error("no draw with non-empty trial arms after {0} attempts")]
    EmptyArm(usize),
    #[error("meta-analysis needs at least {needed} trials, got {got}")]
    TooFewTrials { needed: usize, got: usize },
    #[error("meta-regression design is rank deficient ({trials} trials, {regressors} regressors)")]
    RankDeficient { trials: usize, regressors: usize },
    #[error("estimator `{method}` failed: {reason}")]
    Estimator { method: String, reason: String },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl SimError {
    pub fn is_input_error(&self) -> bool {
        matches!(self, SimError::InvalidScenario { .. } | SimError::UnknownScenarioSet(_) | SimError::Catalog(_))
    }
}

/// Parameters of the covariate joint: two binary covariates with
/// probabilities `p1`, `p2` and one normal covariate with mean `mu`, coupled
/// by an exchangeable latent correlation `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateParams {
    pub p1: f64,
    pub p2: f64,
    pub mu: f64,
    pub rho: f64,
    #[serde(default = "one")]
    pub sd: f64,
}

fn one() -> f64 {
    1.0
}

fn default_reps() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u32,
    /// `5trial` or `1trial`.
    pub set: String,
    pub n_total: usize,
    pub m: usize,
    pub eta: CovariateParams,
    /// Selection into the trial population, `(intercept, x1, x2, x3)`.
    pub beta: Vec<f64>,
    /// Allocation coefficients for trials 2..m; trial 1 is the reference.
    #[serde(default)]
    pub gamma: Vec<Vec<f64>>,
    pub theta1: Vec<f64>,
    pub theta0: Vec<f64>,
    /// Cut point of the continuous covariate's reported strata; the
    /// population median `mu` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x3_cut: Option<f64>,
    #[serde(default = "default_reps")]
    pub replications: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| SimError::InvalidScenario { id: self.id, reason };
        if self.m == 0 {
            return Err(bad("m must be ≥ 1".into()));
        }
        if self.n_total == 0 {
            return Err(bad("n_total must be positive".into()));
        }
        for (name, v) in [("beta", &self.beta), ("theta1", &self.theta1), ("theta0", &self.theta0)] {
            if v.len() != 4 {
                return Err(bad(format!("{name} must have length 4, got {}", v.len())));
            }
        }
        if self.gamma.len() != self.m - 1 || self.gamma.iter().any(|g| g.len() != 4) {
            return Err(bad(format!("gamma must list {} vectors of length 4", self.m - 1)));
        }
        let e = &self.eta;
        if !(e.p1 > 0.0 && e.p1 < 1.0 && e.p2 > 0.0 && e.p2 < 1.0) || !(e.sd > 0.0) || !(e.rho.abs() < 1.0) {
            return Err(bad("covariate parameters out of range".into()));
        }
        Ok(())
    }

    pub fn x3_cut(&self) -> f64 {
        self.x3_cut.unwrap_or(self.eta.mu)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.set, self.id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Catalog {
    scenario: Vec<Scenario>,
}

const CATALOG: &str = include_str!("../../data/scenarios.toml");

/// Parse a scenario catalog file.
pub fn parse_catalog(text: &str) -> Result<Vec<Scenario>, SimError> {
    let c: Catalog = toml::from_str(text).map_err(|e| SimError::Catalog(e.to_string()))?;
    for s in &c.scenario {
        s.validate()?;
    }
    Ok(c.scenario)
}

pub fn catalog_to_toml(scenarios: &[Scenario]) -> String {
    toml::to_string(&Catalog { scenario: scenarios.to_vec() }).expect("catalog serializes")
}

/// The shipped catalog of all 16 + 16 scenarios.
pub fn catalog() -> Vec<Scenario> {
    parse_catalog(CATALOG).expect("shipped catalog is valid")
}

/// Scenarios of one set: `5trial`, `1trial` or `all`.
pub fn scenario_set(name: &str) -> Result<Vec<Scenario>, SimError> {
    let all = catalog();
    match name {
        "all" => Ok(all),
        "5trial" | "1trial" => Ok(all.into_iter().filter(|s| s.set == name).collect()),
        other => Err(SimError::UnknownScenarioSet(other.to_string())),
    }
}

fn ln(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

const ETA: [(f64, f64, f64, f64); 2] = [(0.3, 0.3, 0.0, 0.3), (0.5, 0.5, 0.0, 0.5)];

fn theta_pair(t: usize) -> (Vec<f64>, Vec<f64>) {
    match t {
        0 => (ln(&[0.5, 2.0, 0.5, 1.25]), ln(&[0.5, 0.5, 2.0, 0.8])),
        _ => (ln(&[0.5, 1.25, 0.8, 1.1]), ln(&[0.5, 0.8, 1.25, 0.9])),
    }
}

fn covariates(e: usize) -> CovariateParams {
    let (p1, p2, mu, rho) = ETA[e];
    CovariateParams { p1, p2, mu, rho, sd: 1.0 }
}

/// Full factorial of the multi-trial parameter groups. Scenario
/// `1 + 8θ + 4η + 2β + γ` uses variant (θ, η, β, γ), each 0 or 1.
pub fn five_trial_grid() -> Vec<Scenario> {
    let beta = [ln(&[2.0, 0.5, 0.5, 0.5]), ln(&[0.8, 2.0, 2.0, 2.0])];
    let gamma = [
        vec![ln(&[2.0, 0.5, 2.0, 0.5]), ln(&[2.0, 0.8, 1.25, 0.8]), ln(&[2.0, 0.5, 2.0, 0.5]), ln(&[2.0, 0.8, 1.25, 0.8])],
        vec![ln(&[2.0, 2.0, 0.5, 2.0]), ln(&[2.0, 1.25, 0.8, 1.25]), ln(&[2.0, 2.0, 0.5, 2.0]), ln(&[2.0, 1.25, 0.8, 2.0])],
    ];
    let mut out = Vec::with_capacity(16);
    for t in 0..2 {
        for e in 0..2 {
            for b in 0..2 {
                for g in 0..2 {
                    let (theta1, theta0) = theta_pair(t);
                    out.push(Scenario {
                        id: (1 + 8 * t + 4 * e + 2 * b + g) as u32,
                        set: "5trial".into(),
                        n_total: 5000,
                        m: 5,
                        eta: covariates(e),
                        beta: beta[b].clone(),
                        gamma: gamma[g].clone(),
                        theta1,
                        theta0,
                        x3_cut: None,
                        replications: 1000,
                    });
                }
            }
        }
    }
    out
}

/// Full factorial of the single-trial parameter groups. Scenario
/// `1 + 8θ + 4η + 2β + ν` uses variant (θ, η, β) and `n = 1000 (ν = 0)` or
/// `2000 (ν = 1)`.
pub fn single_trial_grid() -> Vec<Scenario> {
    let beta = [ln(&[1.2, 0.5, 0.5, 0.5]), ln(&[0.5, 2.0, 2.0, 2.0])];
    let mut out = Vec::with_capacity(16);
    for t in 0..2 {
        for e in 0..2 {
            for b in 0..2 {
                for nu in 0..2 {
                    let (theta1, theta0) = theta_pair(t);
                    out.push(Scenario {
                        id: (1 + 8 * t + 4 * e + 2 * b + nu) as u32,
                        set: "1trial".into(),
                        n_total: [1000, 2000][nu],
                        m: 1,
                        eta: covariates(e),
                        beta: beta[b].clone(),
                        gamma: Vec::new(),
                        theta1,
                        theta0,
                        x3_cut: None,
                        replications: 1000,
                    });
                }
            }
        }
    }
    out
}
