//! Synthetic designs with known answers.

use aggcate::aggdata::{
    ArmCounts, Covariate, CovariateSample, CovariateSchema, EffectEstimate, EffectTarget, MetaDataset, MomentSpec,
    MomentSummary, SampleRole, Stratum, StratumRule, TrialData, ANY_TRIAL,
};
use aggcate::cate::{CateBasis, CateSpec, LogisticContrast};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp, Normal};

use crate::law::DiscreteLaw;

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Independent evaluation of a reported moment function.
pub fn eval_spec(spec: &MomentSpec, x: &[f64]) -> f64 {
    match *spec {
        MomentSpec::Mean(k) => x[k],
        MomentSpec::SecondMoment(k) => x[k] * x[k],
        MomentSpec::Proportion { covariate, level } => f64::from(u8::from(x[covariate].round() as usize == level)),
    }
}

fn x3_strata() -> Vec<Stratum> {
    vec![
        Stratum { label: "lo".into(), rule: StratumRule::Interval { lower: None, upper: Some(0.0), right_closed: true } },
        Stratum { label: "hi".into(), rule: StratumRule::Interval { lower: Some(0.0), upper: None, right_closed: true } },
    ]
}

/// `x1`, `x2` binary and `x3` continuous, with `x3` reported as `≤ 0` / `> 0`.
pub fn xyz_schema() -> CovariateSchema {
    let mut s =
        CovariateSchema::new(vec![Covariate::binary("x1"), Covariate::binary("x2"), Covariate::continuous("x3")]).unwrap();
    s.add_subgroups(ANY_TRIAL, "x3", x3_strata()).unwrap();
    s
}

/// Membership in stratum `l` of covariate `k` under [`xyz_schema`].
pub fn in_xyz_stratum(k: usize, l: usize, x: &[f64]) -> bool {
    match k {
        2 if l == 0 => x[2] <= 0.0,
        2 => x[2] > 0.0,
        _ => x[k] == l as f64,
    }
}

/// Twelve support points of `(x1, x2, x3)` with integer multiplicities.
pub fn enumeration_support() -> (DiscreteLaw, Vec<usize>) {
    let mut points = Vec::new();
    for x1 in [0.0, 1.0] {
        for x2 in [0.0, 1.0] {
            for x3 in [-1.0, 0.5, 2.0] {
                points.push(vec![x1, x2, x3]);
            }
        }
    }
    let counts: Vec<usize> = (0..points.len()).map(|k| 2 + (5 * k + 3) % 7).collect();
    let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    (DiscreteLaw::new(points, &w), counts)
}

/// A trial whose covariate law is the base law tilted by `eta` on
/// `h = (x1, x2, x3)`, reporting its marginal effect and the listed
/// `(covariate, stratum)` subgroups.
#[derive(Debug, Clone)]
pub struct EnumTrial {
    pub id: String,
    pub n: u64,
    pub eta: [f64; 3],
    pub subgroups: Vec<(usize, usize)>,
}

/// Reported summaries computed exactly from the tilted law and CATE `g`.
pub fn exact_trial(base: &DiscreteLaw, t: &EnumTrial, g: &dyn Fn(&[f64]) -> f64) -> TrialData {
    let law = base.tilt(|x| x.to_vec(), &t.eta);
    let mut effects = vec![EffectEstimate {
        trial: t.id.clone(),
        target: EffectTarget::Marginal,
        estimate: law.expect(g),
        se: 0.01,
        counts: None,
    }];
    for (j, &(k, l)) in t.subgroups.iter().enumerate() {
        let keep = |x: &[f64]| in_xyz_stratum(k, l, x);
        effects.push(EffectEstimate {
            trial: t.id.clone(),
            target: EffectTarget::Subgroup { covariate: k, stratum: l },
            estimate: law.conditional(g, keep),
            se: 0.01 * (1.0 + 0.5 * j as f64) / law.probability(keep).sqrt(),
            counts: None,
        });
    }
    let moments = (0..3)
        .map(|k| MomentSummary { trial: t.id.clone(), spec: MomentSpec::Mean(k), value: law.expect(|x| x[k]), n: t.n })
        .collect();
    TrialData { id: t.id.clone(), n: t.n, effects, moments }
}

/// `θᵀ(1, x)`.
pub fn linear_cate(theta: &[f64]) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x: &[f64]| theta[0] + x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// Randomized configuration for derivative checks.
#[derive(Debug, Clone)]
pub struct JacobianConfig {
    pub dataset: MetaDataset,
    pub base: CovariateSample,
    pub model: CateSpec,
    pub theta: Vec<f64>,
    /// Coefficients of `b(x) = expit(c₀ + c·x)` for relative-scale representers.
    pub relative: Option<Vec<f64>>,
}

impl JacobianConfig {
    pub fn b(&self) -> Option<impl Fn(&[f64]) -> f64 + '_> {
        self.relative.as_ref().map(|c| move |x: &[f64]| expit(c[0] + x.iter().zip(&c[1..]).map(|(a, b)| a * b).sum::<f64>()))
    }
}

/// `x1` binary, `x2` categorical with three levels, `x3` continuous.
pub fn mixed_schema() -> CovariateSchema {
    let mut s = CovariateSchema::new(vec![
        Covariate::binary("x1"),
        Covariate::categorical("x2", &["a", "b", "c"]),
        Covariate::continuous("x3"),
    ])
    .unwrap();
    s.add_subgroups(ANY_TRIAL, "x3", x3_strata()).unwrap();
    s
}

fn mixed_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b = Bernoulli::new(0.45).unwrap();
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let cat = if u < 0.3 { 0.0 } else if u < 0.6 { 1.0 } else { 2.0 };
        data.extend_from_slice(&[f64::from(u8::from(b.sample(rng))), cat, z.sample(rng)]);
    }
    data
}

/// Weighted means of `specs` on `rows` under weights `exp(η·h)`, with `η`
/// drawn at standardized scale `spread`.
fn tilted_targets(specs: &[MomentSpec], rows: &[f64], width: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len() / width;
    let z = Normal::new(0.0, spread).unwrap();
    let eta: Vec<f64> = specs
        .iter()
        .map(|s| {
            let vals: Vec<f64> = rows.chunks(width).map(|x| eval_spec(s, x)).collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-3);
            z.sample(rng) / sd
        })
        .collect();
    let w: Vec<f64> = rows
        .chunks(width)
        .map(|x| specs.iter().zip(&eta).map(|(s, e)| e * eval_spec(s, x)).sum::<f64>().exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut mu = vec![1.0];
    for s in specs {
        mu.push(rows.chunks(width).zip(&w).map(|(x, wi)| wi * eval_spec(s, x)).sum::<f64>() / total);
    }
    mu
}

pub fn jacobian_config(seed: u64, nonlinear: bool, relative: bool) -> JacobianConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = mixed_schema();
    let n = 300;
    let rows = mixed_rows(n, &mut rng);
    let base = CovariateSample::new(&schema, rows.clone(), SampleRole::Base).unwrap();
    let model: CateSpec =
        if nonlinear { LogisticContrast::new(&schema).into() } else { CateBasis::parse("~ 1 + x1 + x2 + x3", &schema).unwrap().into() };
    let d = if nonlinear { 8 } else { 5 };
    let pool = [
        MomentSpec::Mean(0),
        MomentSpec::Proportion { covariate: 1, level: 1 },
        MomentSpec::Proportion { covariate: 1, level: 2 },
        MomentSpec::Mean(2),
        MomentSpec::SecondMoment(2),
    ];
    let strata = [2usize, 3, 2];
    let mut trials = Vec::new();
    let n_trials = 3;
    // the strata of one covariate average to the marginal, so a trial adds
    // 1 + Σ(levels − 1) independent moments
    let mut reported: Vec<Vec<usize>> =
        (0..n_trials).map(|_| (0..strata.len()).filter(|_| rng.random::<f64>() < 0.6).collect()).collect();
    let independent: usize = reported.iter().map(|c| 1 + c.iter().map(|&k| strata[k] - 1).sum::<usize>()).sum();
    if independent < d + 2 {
        reported = vec![(0..strata.len()).collect(); n_trials];
    }
    for s in 0..n_trials {
        let id = format!("T{}", s + 1);
        let mut specs: Vec<MomentSpec> = pool.iter().copied().filter(|_| rng.random::<f64>() < 0.6).collect();
        if specs.is_empty() {
            specs.push(pool[rng.random_range(0..pool.len())]);
        }
        let mu = tilted_targets(&specs, &rows, 3, 0.3, &mut rng);
        let n_s = rng.random_range(500..2000u64);
        let mut effects = vec![EffectEstimate {
            trial: id.clone(),
            target: EffectTarget::Marginal,
            estimate: rng.random_range(-0.1..0.05),
            se: rng.random_range(0.01..0.03),
            counts: None,
        }];
        for &k in &reported[s] {
            for l in 0..strata[k] {
                effects.push(EffectEstimate {
                    trial: id.clone(),
                    target: EffectTarget::Subgroup { covariate: k, stratum: l },
                    estimate: rng.random_range(-0.1..0.05),
                    se: rng.random_range(0.01..0.03),
                    counts: None,
                });
            }
        }
        let moments = specs
            .iter()
            .zip(&mu[1..])
            .map(|(spec, v)| MomentSummary { trial: id.clone(), spec: *spec, value: *v, n: n_s })
            .collect();
        trials.push(TrialData { id, n: n_s, effects, moments });
    }
    let dataset = MetaDataset::new(schema, trials).unwrap();
    let z = Normal::new(0.0, 0.3).unwrap();
    let theta: Vec<f64> = if nonlinear {
        (0..d).map(|k| if k % 4 == 0 { -1.0 + z.sample(&mut rng) } else { z.sample(&mut rng) }).collect()
    } else {
        (0..d).map(|_| 0.1 * z.sample(&mut rng)).collect()
    };
    let relative = relative.then(|| vec![-1.0, 0.4, 0.2, 0.3]);
    JacobianConfig { dataset, base, model, theta, relative }
}

/// One tilting problem: a base sample, moment functions and targets.
#[derive(Debug, Clone)]
pub struct TiltCase {
    pub label: String,
    pub base: CovariateSample,
    pub specs: Vec<MomentSpec>,
    pub mu_plus: Vec<f64>,
}

/// `b1`, `b2` binary, `c` categorical (3 levels), `z1` normal, `z2` exponential.
pub fn tilt_schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        Covariate::binary("b1"),
        Covariate::binary("b2"),
        Covariate::categorical("c", &["p", "q", "r"]),
        Covariate::continuous("z1"),
        Covariate::continuous("z2"),
    ])
    .unwrap()
}

fn tilt_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b1 = Bernoulli::new(0.35).unwrap();
    let b2 = Bernoulli::new(0.6).unwrap();
    let z = Normal::new(0.5, 1.5).unwrap();
    let e = Exp::new(1.0).unwrap();
    let mut rows = Vec::with_capacity(5 * n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let c = if u < 0.25 { 0.0 } else if u < 0.7 { 1.0 } else { 2.0 };
        rows.extend_from_slice(&[
            f64::from(u8::from(b1.sample(rng))),
            f64::from(u8::from(b2.sample(rng))),
            c,
            z.sample(rng),
            e.sample(rng),
        ]);
    }
    rows
}

const TILT_POOL: [MomentSpec; 8] = [
    MomentSpec::Mean(0),
    MomentSpec::Mean(1),
    MomentSpec::Proportion { covariate: 2, level: 1 },
    MomentSpec::Proportion { covariate: 2, level: 2 },
    MomentSpec::Mean(3),
    MomentSpec::SecondMoment(3),
    MomentSpec::Mean(4),
    MomentSpec::SecondMoment(4),
];

/// Feasible case: `1..=6` moments whose targets are exact means under a
/// random tilt of the base sample.
pub fn feasible_tilt_case(seed: u64, n: usize) -> TiltCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = tilt_rows(n, &mut rng);
    let r = rng.random_range(1..=6usize);
    let mut pool = TILT_POOL.to_vec();
    let mut specs = Vec::with_capacity(r);
    for _ in 0..r {
        specs.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    let mu_plus = tilted_targets(&specs, &rows, 5, 0.4, &mut rng);
    let base = CovariateSample::new(&tilt_schema(), rows, SampleRole::Base).unwrap();
    TiltCase { label: format!("seed {seed}"), base, specs, mu_plus }
}

/// Targets that no reweighting of the base sample can reach.
pub fn infeasible_tilt_cases(n: usize) -> Vec<TiltCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = tilt_rows(n, &mut rng);
    let base = CovariateSample::new(&tilt_schema(), rows.clone(), SampleRole::Base).unwrap();
    let col = |k: usize| rows.chunks(5).map(move |x| x[k]);
    let z1_max = col(3).fold(f64::NEG_INFINITY, f64::max);
    let z1_min = col(3).fold(f64::INFINITY, f64::min);
    let z2_min = col(4).fold(f64::INFINITY, f64::min);
    let case = |label: &str, specs: Vec<MomentSpec>, mu: Vec<f64>| TiltCase {
        label: label.into(),
        base: base.clone(),
        specs,
        mu_plus: std::iter::once(1.0).chain(mu).collect(),
    };
    use MomentSpec::*;
    vec![
        case("binary mean above 1", vec![Mean(0)], vec![1.05]),
        case("binary mean below 0", vec![Mean(1), Mean(3)], vec![-0.1, 0.5]),
        case("binary mean at the boundary", vec![Mean(0)], vec![1.0]),
        case("continuous mean above the maximum", vec![Mean(3)], vec![z1_max + 0.1]),
        case("continuous mean below the minimum", vec![Mean(0), Mean(3)], vec![0.4, z1_min - 1.0]),
        case("level proportion of zero", vec![Proportion { covariate: 2, level: 1 }], vec![0.0]),
        case("negative second moment", vec![SecondMoment(4)], vec![-0.5]),
        case("second moment below squared mean", vec![Mean(3), SecondMoment(3)], vec![1.0, 0.5]),
        case("level proportions summing above 1", vec![Proportion { covariate: 2, level: 1 }, Proportion { covariate: 2, level: 2 }], vec![0.6, 0.6]),
        case("positive variable with mean under its minimum", vec![Mean(4)], vec![z2_min * 0.5]),
    ]
}

/// Linear-CATE binary-outcome design with trials that are exact tilts of
/// the target population.
#[derive(Debug, Clone)]
pub struct CalibrationDesign {
    pub theta: [f64; 4],
    /// Target law: `x1 ~ Bern(p1)`, `x2 ~ Bern(p2)`, `x3 ~ N(0, 1)`.
    pub p1: f64,
    pub p2: f64,
    pub trials: Vec<CalibrationTrial>,
    pub n_base: usize,
    pub n_target: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationTrial {
    pub id: String,
    pub n: usize,
    pub p1: f64,
    pub p2: f64,
    pub mean3: f64,
    /// Covariates whose strata are all reported.
    pub subgroups: Vec<usize>,
}

/// One replication's inputs.
pub struct CalibrationDraw {
    pub dataset: MetaDataset,
    pub base: CovariateSample,
    pub target: CovariateSample,
}

impl Default for CalibrationDesign {
    fn default() -> Self {
        let t = |id: &str, n, p1, p2, mean3, subgroups: &[usize]| CalibrationTrial {
            id: id.into(),
            n,
            p1,
            p2,
            mean3,
            subgroups: subgroups.to_vec(),
        };
        CalibrationDesign {
            theta: [-0.04, -0.03, 0.02, -0.015],
            p1: 0.4,
            p2: 0.5,
            trials: vec![
                t("A", 1200, 0.3, 0.6, -0.5, &[0, 2]),
                t("B", 1600, 0.55, 0.4, 0.4, &[1]),
                t("C", 1000, 0.45, 0.5, 0.0, &[0, 1]),
            ],
            n_base: 4000,
            n_target: 2000,
        }
    }
}

impl CalibrationDesign {
    pub fn cate(&self, x: &[f64]) -> f64 {
        linear_cate(&self.theta)(x)
    }

    /// Population ATE in the target.
    pub fn psi(&self) -> f64 {
        self.theta[0] + self.theta[1] * self.p1 + self.theta[2] * self.p2
    }

    fn control_risk(x: &[f64]) -> f64 {
        0.3 + 0.05 * x[0] - 0.04 * x[1] + 0.02 * x[2].tanh()
    }

    fn covariates(n: usize, p1: f64, p2: f64, mean3: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let b1 = Bernoulli::new(p1).unwrap();
        let b2 = Bernoulli::new(p2).unwrap();
        let z = Normal::new(mean3, 1.0).unwrap();
        let mut rows = Vec::with_capacity(3 * n);
        for _ in 0..n {
            rows.extend_from_slice(&[f64::from(u8::from(b1.sample(rng))), f64::from(u8::from(b2.sample(rng))), z.sample(rng)]);
        }
        rows
    }

    pub fn draw(&self, seed: u64) -> CalibrationDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = xyz_schema();
        let mut trials = Vec::new();
        for t in &self.trials {
            let rows = Self::covariates(t.n, t.p1, t.p2, t.mean3, &mut rng);
            let mut arm = Vec::with_capacity(t.n);
            let mut y = Vec::with_capacity(t.n);
            for (i, x) in rows.chunks(3).enumerate() {
                let a = i % 2 == 0;
                let p0 = Self::control_risk(x);
                let p = if a { (p0 + self.cate(x)).clamp(0.0, 1.0) } else { p0 };
                arm.push(a);
                y.push(rng.random::<f64>() < p);
            }
            let summarize = |keep: &dyn Fn(&[f64]) -> bool| {
                let (mut e1, mut n1, mut e0, mut n0) = (0u64, 0u64, 0u64, 0u64);
                for (i, x) in rows.chunks(3).enumerate() {
                    if keep(x) {
                        if arm[i] {
                            n1 += 1;
                            e1 += u64::from(y[i]);
                        } else {
                            n0 += 1;
                            e0 += u64::from(y[i]);
                        }
                    }
                }
                let (q1, q0) = (e1 as f64 / n1 as f64, e0 as f64 / n0 as f64);
                let se = (q1 * (1.0 - q1) / n1 as f64 + q0 * (1.0 - q0) / n0 as f64).sqrt();
                (q1 - q0, se, ArmCounts { events1: e1, n1, events0: e0, n0 })
            };
            let (est, se, counts) = summarize(&|_| true);
            let mut effects = vec![EffectEstimate {
                trial: t.id.clone(),
                target: EffectTarget::Marginal,
                estimate: est,
                se,
                counts: Some(counts),
            }];
            for &k in &t.subgroups {
                for l in 0..2 {
                    let (est, se, counts) = summarize(&|x| in_xyz_stratum(k, l, x));
                    effects.push(EffectEstimate {
                        trial: t.id.clone(),
                        target: EffectTarget::Subgroup { covariate: k, stratum: l },
                        estimate: est,
                        se,
                        counts: Some(counts),
                    });
                }
            }
            let moments = (0..3)
                .map(|k| MomentSummary {
                    trial: t.id.clone(),
                    spec: MomentSpec::Mean(k),
                    value: rows.chunks(3).map(|x| x[k]).sum::<f64>() / t.n as f64,
                    n: t.n as u64,
                })
                .collect();
            trials.push(TrialData { id: t.id.clone(), n: t.n as u64, effects, moments });
        }
        let dataset = MetaDataset::new(schema.clone(), trials).unwrap();
        let base_rows = Self::covariates(self.n_base, self.p1, self.p2, 0.0, &mut rng);
        let target_rows = Self::covariates(self.n_target, self.p1, self.p2, 0.0, &mut rng);
        CalibrationDraw {
            dataset,
            base: CovariateSample::new(&schema, base_rows, SampleRole::Base).unwrap(),
            target: CovariateSample::new(&schema, target_rows, SampleRole::Target).unwrap(),
        }
    }
}
