use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scenario, SimError};
use crate::aggdata::{
    risk_difference_from_counts, sd_to_second_moment, ArmCounts, Covariate, CovariateSample, CovariateSchema,
    EffectEstimate, EffectTarget, MetaDataset, MomentSpec, MomentSummary, SampleRole, Stratum, StratumRule, TrialData,
};
use crate::linalg::expit;
use crate::par::Parallelism;
use crate::synthpop::{self, CopulaSpec, Marginal, MarginalSpec};

pub const COVARIATE_NAMES: [&str; 3] = ["x1", "x2", "x3"];
const MAX_ATTEMPTS: usize = 100;

/// Pooled individual trial data.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualData {
    /// Row-major covariates, three per row.
    pub x: Vec<f64>,
    pub trial: Vec<usize>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

impl IndividualData {
    pub fn n_rows(&self) -> usize {
        self.a.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[3 * i..3 * i + 3]
    }
}

#[derive(Debug, Clone)]
pub struct DgpOutput {
    pub individual: IndividualData,
    pub dataset: MetaDataset,
    pub target: CovariateSample,
    /// Target-sample mean of the true CATE.
    pub truth: f64,
    /// Number of discarded draws with an empty arm.
    pub redraws: usize,
}

fn lin(c: &[f64], x: &[f64]) -> f64 {
    c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[2]
}

fn schema(scenario: &Scenario, trial_ids: &[String]) -> Result<CovariateSchema, SimError> {
    let mut schema = CovariateSchema::new(vec![
        Covariate::binary(COVARIATE_NAMES[0]),
        Covariate::binary(COVARIATE_NAMES[1]),
        Covariate::continuous(COVARIATE_NAMES[2]),
    ])?;
    let c = scenario.x3_cut();
    for t in trial_ids {
        schema.add_subgroups(
            t,
            COVARIATE_NAMES[2],
            vec![
                Stratum { label: format!("<={c}"), rule: StratumRule::Interval { lower: None, upper: Some(c), right_closed: true } },
                Stratum { label: format!(">{c}"), rule: StratumRule::Interval { lower: Some(c), upper: None, right_closed: true } },
            ],
        )?;
    }
    Ok(schema)
}

fn copula(scenario: &Scenario, seed: u64) -> CopulaSpec {
    let e = &scenario.eta;
    let m = |name: &str, marginal| MarginalSpec { name: name.into(), marginal };
    CopulaSpec {
        n: scenario.n_total,
        seed,
        marginals: vec![
            m(COVARIATE_NAMES[0], Marginal::Bernoulli { p: e.p1 }),
            m(COVARIATE_NAMES[1], Marginal::Bernoulli { p: e.p2 }),
            m(COVARIATE_NAMES[2], Marginal::Normal { mean: e.mu, sd: e.sd }),
        ],
        correlation: None,
        exchangeable: if e.rho == 0.0 { None } else { Some(e.rho) },
    }
}

fn counts(rows: impl Iterator<Item = (f64, f64)>) -> ArmCounts {
    let mut c = ArmCounts { events1: 0, n1: 0, events0: 0, n0: 0 };
    for (a, y) in rows {
        if a == 1.0 {
            c.n1 += 1;
            c.events1 += y as u64;
        } else {
            c.n0 += 1;
            c.events0 += y as u64;
        }
    }
    c
}

fn effect(trial: &str, target: EffectTarget, c: ArmCounts) -> Option<EffectEstimate> {
    let (estimate, se) = risk_difference_from_counts(c.events1, c.n1, c.events0, c.n0).ok()?;
    Some(EffectEstimate { trial: trial.to_string(), target, estimate, se, counts: Some(c) })
}

/// Draw one replication. Draws in which some reported effect would have an
/// empty arm (or the target sample is empty) are discarded and redrawn from
/// the same stream.
pub fn run_dgp(scenario: &Scenario, rep_seed: u64) -> Result<DgpOutput, SimError> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    let trial_ids: Vec<String> = (1..=scenario.m).map(|s| format!("trial{s}")).collect();
    let schema = schema(scenario, &trial_ids)?;
    let cut = scenario.x3_cut();
    for attempt in 0..MAX_ATTEMPTS {
        let pop = synthpop::sample(&copula(scenario, rng.random()), SampleRole::Target, Parallelism::Sequential)?;
        let mut individual = IndividualData { x: Vec::new(), trial: Vec::new(), a: Vec::new(), y: Vec::new() };
        let mut target = Vec::new();
        let mut truth = 0.0;
        let mut n_target = 0usize;
        for x in pop.rows() {
            let selected = rng.random::<f64>() < expit(lin(&scenario.beta, x));
            let u_alloc: f64 = rng.random();
            let a = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let p1 = expit(lin(&scenario.theta1, x));
            let p0 = expit(lin(&scenario.theta0, x));
            let y1 = if rng.random::<f64>() < p1 { 1.0 } else { 0.0 };
            let y0 = if rng.random::<f64>() < p0 { 1.0 } else { 0.0 };
            if !selected {
                target.extend_from_slice(x);
                truth += p1 - p0;
                n_target += 1;
                continue;
            }
            let mut scores = vec![1.0];
            scores.extend(scenario.gamma.iter().map(|g| lin(g, x).exp()));
            let total: f64 = scores.iter().sum();
            let mut acc = 0.0;
            let mut s = scores.len() - 1;
            for (j, sc) in scores.iter().enumerate() {
                acc += sc / total;
                if u_alloc < acc {
                    s = j;
                    break;
                }
            }
            individual.x.extend_from_slice(x);
            individual.trial.push(s);
            individual.a.push(a);
            individual.y.push(if a == 1.0 { y1 } else { y0 });
        }
        match aggregate(scenario, &trial_ids, &individual, cut) {
            Some(trials) if n_target > 0 => {
                let dataset = MetaDataset::new(schema.clone(), trials)?;
                let target = CovariateSample::new(&schema, target, SampleRole::Target)?;
                return Ok(DgpOutput { individual, dataset, target, truth: truth / n_target as f64, redraws: attempt });
            }
            _ => log::debug!("scenario {}: empty trial arm or target, redrawing", scenario.label()),
        }
    }
    Err(SimError::EmptyArm(MAX_ATTEMPTS))
}

fn aggregate(
    scenario: &Scenario,
    trial_ids: &[String],
    ind: &IndividualData,
    cut: f64,
) -> Option<Vec<TrialData>> {
    let mut trials = Vec::with_capacity(scenario.m);
    for (s, id) in trial_ids.iter().enumerate() {
        let rows: Vec<usize> = (0..ind.n_rows()).filter(|&i| ind.trial[i] == s).collect();
        let arm = |keep: &dyn Fn(&[f64]) -> bool| {
            counts(rows.iter().filter(|&&i| keep(ind.row(i))).map(|&i| (ind.a[i], ind.y[i])))
        };
        let mut effects = vec![effect(id, EffectTarget::Marginal, arm(&|_| true))?];
        for k in 0..2 {
            for level in 0..2 {
                let c = arm(&|x| x[k] == level as f64);
                effects.push(effect(id, EffectTarget::Subgroup { covariate: k, stratum: level }, c)?);
            }
        }
        effects.push(effect(id, EffectTarget::Subgroup { covariate: 2, stratum: 0 }, arm(&|x| x[2] <= cut))?);
        effects.push(effect(id, EffectTarget::Subgroup { covariate: 2, stratum: 1 }, arm(&|x| x[2] > cut))?);
        let n = rows.len();
        let nf = n as f64;
        let mean = |k: usize| rows.iter().map(|&i| ind.row(i)[k]).sum::<f64>() / nf;
        let m3 = mean(2);
        let sd = (rows.iter().map(|&i| (ind.row(i)[2] - m3).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let summary = |spec, value| MomentSummary { trial: id.clone(), spec, value, n: n as u64 };
        let moments = vec![
            summary(MomentSpec::Mean(0), mean(0)),
            summary(MomentSpec::Mean(1), mean(1)),
            summary(MomentSpec::Mean(2), m3),
            summary(MomentSpec::SecondMoment(2), sd_to_second_moment(sd, m3, n as u64)),
        ];
        trials.push(TrialData { id: id.clone(), n: n as u64, effects, moments });
    }
    Some(trials)
}
