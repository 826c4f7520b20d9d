//! Gaussian-copula generation of individual covariate rows from marginal
//! summaries.
//!
//! A latent `Z ~ MVN(0, R)` is drawn per row. Continuous covariates are
//! `μ + σZ`, binary ones `1{Z > Φ⁻¹(1 − p)}`, categorical ones cut `Z` at the
//! normal quantiles of the cumulative level probabilities.
//!
//! Rows are generated in chunks of [`CHUNK_ROWS`]; chunk `c` draws from a
//! ChaCha20 stream seeded with `seed` and stream id `c`, so output does not
//! depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::aggdata::{Covariate, CovariateKind, CovariateSample, CovariateSchema, DataError, MetaDataset, MomentSpec, SampleRole};
use crate::par::{self, Parallelism};

pub const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid copula spec: {0}")]
    InvalidSpec(String),
    #[error("latent correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("continuous covariate `{0}` needs an SD (no default is assumed)")]
    MissingSd(String),
    #[error("spec file: {0}")]
    Parse(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl SynthError {
    pub fn is_input_error(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Marginal {
    Bernoulli { p: f64 },
    Normal { mean: f64, sd: f64 },
    Categorical { levels: Vec<String>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub name: String,
    #[serde(flatten)]
    pub marginal: Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "marginal")]
    pub marginals: Vec<MarginalSpec>,
    /// Latent correlation matrix; identity when absent and no `exchangeable`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Common off-diagonal latent correlation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchangeable: Option<f64>,
}

impl CopulaSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: CopulaSpec = toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("copula spec serializes")
    }

    pub fn k(&self) -> usize {
        self.marginals.len()
    }

    /// Resolved `K × K` latent correlation.
    pub fn correlation_matrix(&self) -> Result<DMatrix<f64>, SynthError> {
        let k = self.k();
        match (&self.correlation, self.exchangeable) {
            (Some(_), Some(_)) => Err(SynthError::InvalidSpec("give either `correlation` or `exchangeable`".into())),
            (Some(rows), None) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(SynthError::InvalidSpec(format!("correlation must be {k}×{k}")));
                }
                Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
            }
            (None, Some(rho)) => Ok(DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })),
            (None, None) => Ok(DMatrix::identity(k, k)),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.marginals.is_empty() {
            return Err(SynthError::InvalidSpec("no marginals".into()));
        }
        for m in &self.marginals {
            let bad = |r: String| SynthError::InvalidSpec(format!("`{}`: {r}", m.name));
            match &m.marginal {
                Marginal::Bernoulli { p } if !(*p > 0.0 && *p < 1.0) => return Err(bad(format!("p = {p} not in (0, 1)"))),
                Marginal::Normal { mean, sd } if !(*sd > 0.0 && sd.is_finite() && mean.is_finite()) => {
                    return Err(bad(format!("needs finite mean and sd > 0, got ({mean}, {sd})")))
                }
                Marginal::Categorical { levels, probs } => {
                    if levels.len() != probs.len() || levels.len() < 2 {
                        return Err(bad("levels and probs must have equal length ≥ 2".into()));
                    }
                    if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                        return Err(bad("probabilities must lie in (0, 1)".into()));
                    }
                    let s: f64 = probs.iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(bad(format!("probabilities sum to {s}")));
                    }
                }
                _ => {}
            }
        }
        let r = self.correlation_matrix()?;
        for i in 0..r.nrows() {
            if (r[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(SynthError::InvalidSpec("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                if (r[(i, j)] - r[(j, i)]).abs() > 1e-12 {
                    return Err(SynthError::InvalidSpec("correlation must be symmetric".into()));
                }
            }
        }
        r.cholesky().ok_or(SynthError::NotPositiveDefinite)?;
        Ok(())
    }

    /// Schema implied by the marginals (Bernoulli → binary).
    pub fn schema(&self) -> Result<CovariateSchema, SynthError> {
        let covs = self
            .marginals
            .iter()
            .map(|m| match &m.marginal {
                Marginal::Bernoulli { .. } => Covariate::binary(&m.name),
                Marginal::Normal { .. } => Covariate::continuous(&m.name),
                Marginal::Categorical { levels, .. } => {
                    let l: Vec<&str> = levels.iter().map(String::as_str).collect();
                    Covariate::categorical(&m.name, &l)
                }
            })
            .collect();
        Ok(CovariateSchema::new(covs)?)
    }
}

enum Transform {
    Threshold(f64),
    Affine(f64, f64),
    Cuts(Vec<f64>),
}

impl Transform {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Transform::Threshold(t) => {
                if z > *t {
                    1.0
                } else {
                    0.0
                }
            }
            Transform::Affine(m, s) => m + s * z,
            Transform::Cuts(c) => c.iter().position(|&t| z <= t).unwrap_or(c.len()) as f64,
        }
    }
}

fn transforms(spec: &CopulaSpec) -> Vec<Transform> {
    let n01 = StdNormal::new(0.0, 1.0).expect("standard normal");
    spec.marginals
        .iter()
        .map(|m| match &m.marginal {
            Marginal::Bernoulli { p } => Transform::Threshold(n01.inverse_cdf(1.0 - p)),
            Marginal::Normal { mean, sd } => Transform::Affine(*mean, *sd),
            Marginal::Categorical { probs, .. } => {
                let mut acc = 0.0;
                let cuts = probs[..probs.len() - 1]
                    .iter()
                    .map(|p| {
                        acc += p;
                        n01.inverse_cdf(acc.min(1.0))
                    })
                    .collect();
                Transform::Cuts(cuts)
            }
        })
        .collect()
}

/// Draw the latent Gaussian rows (`n × K`, row-major) for the spec.
pub fn latent_draws(spec: &CopulaSpec, parallelism: Parallelism) -> Result<Vec<f64>, SynthError> {
    let k = spec.k();
    let r = spec.correlation_matrix()?;
    let chol = r.cholesky().ok_or(SynthError::NotPositiveDefinite)?;
    let l = chol.l();
    let n_chunks = spec.n.div_ceil(CHUNK_ROWS);
    let chunks = par::map_range(n_chunks, parallelism, |c| {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        let rows = CHUNK_ROWS.min(spec.n - c * CHUNK_ROWS);
        let mut out = Vec::with_capacity(rows * k);
        let mut e = DVector::zeros(k);
        for _ in 0..rows {
            for v in e.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let z = &l * &e;
            out.extend(z.iter());
        }
        out
    });
    Ok(chunks.concat())
}

/// Generate a covariate sample from the spec.
pub fn sample(spec: &CopulaSpec, role: SampleRole, parallelism: Parallelism) -> Result<CovariateSample, SynthError> {
    sample_with_hook(spec, role, parallelism, &|_, _| None)
}

/// As [`sample`], but `hook(k, u)` may return a value from a custom quantile
/// function for covariate `k` at uniform `u = Φ(Z_k)`, overriding the marginal.
pub fn sample_with_hook(
    spec: &CopulaSpec,
    role: SampleRole,
    parallelism: Parallelism,
    hook: &(dyn Fn(usize, f64) -> Option<f64> + Sync),
) -> Result<CovariateSample, SynthError> {
    spec.validate()?;
    let schema = spec.schema()?;
    let k = spec.k();
    let tr = transforms(spec);
    let n01 = StdNormal::new(0.0, 1.0).expect("standard normal");
    let mut data = latent_draws(spec, parallelism)?;
    for row in data.chunks_mut(k) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = hook(j, n01.cdf(*v)).unwrap_or_else(|| tr[j].apply(*v));
        }
    }
    Ok(CovariateSample::new(&schema, data, role)?)
}

/// Reported marginal summary of one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateSummary {
    Continuous { name: String, mean: f64, sd: Option<f64> },
    Binary { name: String, proportion: f64 },
    Categorical { name: String, levels: Vec<String>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorrelationInput {
    Matrix(Vec<Vec<f64>>),
    Exchangeable(f64),
}

/// Build a copula spec whose marginals match the summaries exactly.
pub fn fit_spec_from_summaries(
    summaries: &[CovariateSummary],
    correlation: CorrelationInput,
    n: usize,
    seed: u64,
) -> Result<CopulaSpec, SynthError> {
    let marginals = summaries
        .iter()
        .map(|s| match s {
            CovariateSummary::Continuous { name, mean, sd } => {
                let sd = sd.ok_or_else(|| SynthError::MissingSd(name.clone()))?;
                Ok(MarginalSpec { name: name.clone(), marginal: Marginal::Normal { mean: *mean, sd } })
            }
            CovariateSummary::Binary { name, proportion } => {
                Ok(MarginalSpec { name: name.clone(), marginal: Marginal::Bernoulli { p: *proportion } })
            }
            CovariateSummary::Categorical { name, levels, probs } => Ok(MarginalSpec {
                name: name.clone(),
                marginal: Marginal::Categorical { levels: levels.clone(), probs: probs.clone() },
            }),
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let (correlation, exchangeable) = match correlation {
        CorrelationInput::Matrix(m) => (Some(m), None),
        CorrelationInput::Exchangeable(0.0) => (None, None),
        CorrelationInput::Exchangeable(r) => (None, Some(r)),
    };
    let spec = CopulaSpec { n, seed, marginals, correlation, exchangeable };
    spec.validate()?;
    Ok(spec)
}

/// Marginal summaries of one trial's reported moments. Continuous SDs come
/// from the second moment when present.
pub fn summaries_from_trial(dataset: &MetaDataset, trial: &str) -> Result<Vec<CovariateSummary>, SynthError> {
    let t = dataset
        .trial(trial)
        .ok_or_else(|| SynthError::InvalidSpec(format!("unknown trial `{trial}`")))?;
    let find = |spec: MomentSpec| t.moments.iter().find(|m| m.spec == spec).map(|m| m.value);
    dataset
        .schema
        .covariates()
        .iter()
        .enumerate()
        .map(|(k, c)| match &c.kind {
            CovariateKind::Continuous => {
                let mean = find(MomentSpec::Mean(k))
                    .ok_or_else(|| SynthError::InvalidSpec(format!("no mean reported for `{}`", c.name)))?;
                let sd = find(MomentSpec::SecondMoment(k)).map(|m2| (m2 - mean * mean).max(0.0).sqrt());
                Ok(CovariateSummary::Continuous { name: c.name.clone(), mean, sd })
            }
            CovariateKind::Binary => {
                let p = find(MomentSpec::Mean(k))
                    .or_else(|| find(MomentSpec::Proportion { covariate: k, level: 1 }))
                    .ok_or_else(|| SynthError::InvalidSpec(format!("no proportion reported for `{}`", c.name)))?;
                Ok(CovariateSummary::Binary { name: c.name.clone(), proportion: p })
            }
            CovariateKind::Categorical { levels } => {
                let probs = (0..levels.len())
                    .map(|l| find(MomentSpec::Proportion { covariate: k, level: l }))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| SynthError::InvalidSpec(format!("incomplete level proportions for `{}`", c.name)))?;
                Ok(CovariateSummary::Categorical { name: c.name.clone(), levels: levels.clone(), probs })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse(sd: Option<f64>) -> Vec<CovariateSummary> {
        vec![
            CovariateSummary::Continuous { name: "lvef".into(), mean: 45.4, sd },
            CovariateSummary::Binary { name: "prehhf".into(), proportion: 0.091 },
            CovariateSummary::Binary { name: "diabetes".into(), proportion: 0.265 },
        ]
    }

    #[test]
    fn pulse_spec() {
        let spec = fit_spec_from_summaries(&pulse(Some(10.0)), CorrelationInput::Exchangeable(0.0), 100, 1).unwrap();
        assert_eq!(spec.marginals[0].marginal, Marginal::Normal { mean: 45.4, sd: 10.0 });
        assert_eq!(spec.marginals[1].marginal, Marginal::Bernoulli { p: 0.091 });
        assert_eq!(spec.correlation_matrix().unwrap(), DMatrix::identity(3, 3));
        assert!(matches!(
            fit_spec_from_summaries(&pulse(None), CorrelationInput::Exchangeable(0.0), 100, 1),
            Err(SynthError::MissingSd(_))
        ));
    }

    #[test]
    fn exchangeable_off_diagonals() {
        let spec = fit_spec_from_summaries(&pulse(Some(10.0)), CorrelationInput::Exchangeable(0.3), 10, 1).unwrap();
        let r = spec.correlation_matrix().unwrap();
        assert_eq!(r[(0, 1)], 0.3);
        assert_eq!(r[(2, 1)], 0.3);
        assert_eq!(r[(1, 1)], 1.0);
    }

    #[test]
    fn non_pd_correlation_rejected() {
        let m = vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]];
        let err = fit_spec_from_summaries(&pulse(Some(10.0)), CorrelationInput::Matrix(m), 10, 1).unwrap_err();
        assert!(matches!(err, SynthError::NotPositiveDefinite));
    }

    #[test]
    fn toml_round_trip() {
        let spec = fit_spec_from_summaries(&pulse(Some(10.0)), CorrelationInput::Exchangeable(0.2), 50, 9).unwrap();
        let back = CopulaSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn chunked_output_is_schedule_independent() {
        let spec = fit_spec_from_summaries(&pulse(Some(10.0)), CorrelationInput::Exchangeable(0.3), 3 * CHUNK_ROWS + 17, 5)
            .unwrap();
        let a = sample(&spec, SampleRole::Target, Parallelism::Sequential).unwrap();
        let b = sample(&spec, SampleRole::Target, Parallelism::Jobs(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_rows(), 3 * CHUNK_ROWS + 17);
    }
}
