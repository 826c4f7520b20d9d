use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{ipd_gformula, meta_random_effects, meta_regression, run_dgp, DgpOutput, Scenario, SimError};
use crate::aggdata::{MomentSpec, SampleRole};
use crate::cate::{CateBasis, CateSpec};
use crate::estimands::{transport_ate, TransportOptions};
use crate::gmm::{self, FitOptions, SystemOptions, Weighting};
use crate::inference::wald_ci;
use crate::par::{self, Parallelism};

/// Failure fraction at or above which a scenario/method row is flagged.
pub const FAILURE_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cima,
    Meta,
    Metareg,
    Ipd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cima, Method::Meta, Method::Metareg, Method::Ipd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cima => "cima",
            Method::Meta => "meta",
            Method::Metareg => "metareg",
            Method::Ipd => "ipd",
        }
    }

    /// Methods applicable to a design with `m` trials.
    pub fn applicable(m: usize) -> Vec<Method> {
        if m >= 2 {
            Method::ALL.to_vec()
        } else {
            vec![Method::Cima, Method::Ipd]
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown method `{s}` (expected cima, meta, metareg or ipd)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Overrides every scenario's own replication count.
    pub replications: Option<usize>,
    pub seed: u64,
    /// Restrict to these methods (intersected with the applicable ones).
    pub methods: Option<Vec<Method>>,
    pub parallelism: Parallelism,
    /// GMM weighting of the CIMA fits.
    pub cima_weighting: Weighting,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replications: None,
            seed: 42,
            methods: None,
            parallelism: Parallelism::Parallel,
            cima_weighting: Weighting::InverseSe2,
        }
    }
}

/// Per-replication estimates, or the failure message per method.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub rep: usize,
    pub truth: f64,
    pub results: Vec<(Method, Result<(f64, f64), String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub set: String,
    pub scenario: u32,
    pub method: Method,
    pub replications: usize,
    pub failures: usize,
    /// Failure fraction reached [`FAILURE_THRESHOLD`].
    pub flagged: bool,
    /// Mean of the per-replication target-sample truths.
    pub truth: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub mae: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub bias_mcse: f64,
    pub mse_mcse: f64,
    pub coverage_mcse: f64,
}

/// Seed of replication `rep` of a scenario: the first word of the ChaCha20
/// stream `(set, id, rep)` under the master seed.
pub fn rep_seed(master: u64, scenario: &Scenario, rep: usize) -> u64 {
    let set_code: u64 = if scenario.set == "5trial" { 0 } else { 1 };
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream((set_code << 56) | ((scenario.id as u64) << 32) | rep as u64);
    rng.next_u64()
}

fn cima(d: &DgpOutput, weighting: Weighting) -> Result<(f64, f64), String> {
    let model: CateSpec = CateBasis::default_for(&d.dataset.schema).into();
    let base = d.target.clone().with_role(SampleRole::Base);
    let opts = SystemOptions { parallelism: Parallelism::Sequential, ..Default::default() };
    let system = gmm::build_system(model, d.dataset.clone(), base, &opts, None).map_err(|e| e.to_string())?;
    let fit = gmm::fit(&system, &FitOptions { weighting, ..Default::default() }).map_err(|e| e.to_string())?;
    let r = transport_ate(&fit, &d.target, TransportOptions::default()).map_err(|e| e.to_string())?;
    Ok((r.psi_hat, r.se))
}

fn marginal_effects(d: &DgpOutput) -> (Vec<f64>, Vec<f64>) {
    d.dataset.trials.iter().map(|t| (t.effects[0].estimate, t.effects[0].se)).unzip()
}

fn metareg(d: &DgpOutput) -> Result<(f64, f64), SimError> {
    let (y, se) = marginal_effects(d);
    let v: Vec<f64> = se.iter().map(|s| s * s).collect();
    let k = d.dataset.schema.len();
    let mut x = DMatrix::from_element(y.len(), k + 1, 1.0);
    for (s, t) in d.dataset.trials.iter().enumerate() {
        for m in &t.moments {
            if let MomentSpec::Mean(j) = m.spec {
                x[(s, j + 1)] = m.value;
            }
        }
    }
    let mut x0 = vec![1.0; k + 1];
    for (j, v) in x0.iter_mut().skip(1).enumerate() {
        *v = d.target.column(j).sum::<f64>() / d.target.n_rows() as f64;
    }
    Ok(meta_regression(&y, &v, &x)?.predict(&x0))
}

fn estimate(method: Method, d: &DgpOutput, weighting: Weighting) -> Result<(f64, f64), String> {
    match method {
        Method::Cima => cima(d, weighting),
        Method::Meta => {
            let (y, se) = marginal_effects(d);
            meta_random_effects(&y, &se).map(|r| (r.pooled, r.se)).map_err(|e| e.to_string())
        }
        Method::Metareg => metareg(d).map_err(|e| e.to_string()),
        Method::Ipd => ipd_gformula(&d.individual, &d.target).map_err(|e| e.to_string()),
    }
}

/// Draw one replication and apply every requested method.
pub fn run_replication(
    scenario: &Scenario,
    seed: u64,
    rep: usize,
    methods: &[Method],
    cima_weighting: Weighting,
) -> RepOutcome {
    match run_dgp(scenario, seed) {
        Ok(d) => RepOutcome {
            rep,
            truth: d.truth,
            results: methods.iter().map(|&m| (m, estimate(m, &d, cima_weighting))).collect(),
        },
        Err(e) => RepOutcome {
            rep,
            truth: f64::NAN,
            results: methods.iter().map(|&m| (m, Err(format!("data generation: {e}")))).collect(),
        },
    }
}

fn methods_for(scenario: &Scenario, cfg: &StudyConfig) -> Vec<Method> {
    let ok = Method::applicable(scenario.m);
    match &cfg.methods {
        Some(sel) => ok.into_iter().filter(|m| sel.contains(m)).collect(),
        None => ok,
    }
}

/// Run every scenario; replications are independent and scheduled across
/// all scenarios at once. Metrics are reduced sequentially in scenario and
/// method order.
pub fn run_study(scenarios: &[Scenario], cfg: &StudyConfig) -> Result<Vec<MetricsRow>, SimError> {
    for s in scenarios {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..cfg.replications.unwrap_or(s.replications)).map(move |r| (i, r)))
        .collect();
    let outcomes = par::map(&jobs, cfg.parallelism, |&(i, r)| {
        let s = &scenarios[i];
        run_replication(s, rep_seed(cfg.seed, s, r), r, &methods_for(s, cfg), cfg.cima_weighting)
    });
    let mut rows = Vec::new();
    let mut start = 0;
    for (i, s) in scenarios.iter().enumerate() {
        let n = jobs[start..].iter().take_while(|(j, _)| *j == i).count();
        let reps = &outcomes[start..start + n];
        start += n;
        if n == 0 {
            continue;
        }
        for (mi, &method) in methods_for(s, cfg).iter().enumerate() {
            rows.push(summarize(s, method, reps, mi));
        }
    }
    Ok(rows)
}

fn summarize(s: &Scenario, method: Method, reps: &[RepOutcome], mi: usize) -> MetricsRow {
    let mut err = Vec::new();
    let mut se = Vec::new();
    let mut truths = Vec::new();
    let mut covered = 0usize;
    let mut failures = 0usize;
    for r in reps {
        match &r.results[mi].1 {
            Ok((psi, sd)) if psi.is_finite() && sd.is_finite() => {
                err.push(psi - r.truth);
                se.push(*sd);
                truths.push(r.truth);
                let (lo, hi) = wald_ci(*psi, *sd);
                if lo <= r.truth && r.truth <= hi {
                    covered += 1;
                }
            }
            Ok(_) => failures += 1,
            Err(msg) => {
                failures += 1;
                log::debug!("{} rep {} {}: {msg}", s.label(), r.rep, method);
            }
        }
    }
    let total = reps.len();
    let flagged = failures as f64 >= FAILURE_THRESHOLD * total as f64 && failures > 0;
    if flagged {
        log::warn!("{} {}: {failures}/{total} replications failed", s.label(), method);
    }
    let r = err.len() as f64;
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let bias = mean(&err);
    let variance = mean(&err.iter().map(|e| (e - bias).powi(2)).collect::<Vec<_>>());
    let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
    let mse = mean(&sq);
    let mse_sd = mean(&sq.iter().map(|q| (q - mse).powi(2)).collect::<Vec<_>>()).sqrt();
    let coverage = if err.is_empty() { f64::NAN } else { covered as f64 / r };
    MetricsRow {
        set: s.set.clone(),
        scenario: s.id,
        method,
        replications: total,
        failures,
        flagged,
        truth: mean(&truths),
        bias,
        variance,
        mse,
        mae: mean(&err.iter().map(|e| e.abs()).collect::<Vec<_>>()),
        coverage,
        mean_se: mean(&se),
        bias_mcse: (variance / r).sqrt(),
        mse_mcse: mse_sd / r.sqrt(),
        coverage_mcse: (coverage * (1.0 - coverage) / r).sqrt(),
    }
}

/// Long-format metrics table, one row per scenario and method.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record([
            "set",
            "scenario",
            "method",
            "replications",
            "failures",
            "flagged",
            "truth",
            "bias",
            "variance",
            "mse",
            "mae",
            "coverage",
            "mean_se",
            "bias_mcse",
            "mse_mcse",
            "coverage_mcse",
        ])?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
