//! Aggregate trial summaries and individual-level covariate samples.
//!
//! A [`MetaDataset`] holds, per trial, the reported effect estimates (the
//! marginal effect plus any one-at-a-time subgroup effects) and descriptive
//! covariate moments. A [`CovariateSample`] holds individual rows used either
//! as the base sample over which moment integrals are evaluated or as the
//! target population sample.

mod counts;
mod io;
mod schema;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use counts::{risk_difference_from_counts, risk_ratio_from_counts, ArmCounts};
pub use io::{
    load_covariate_sample, load_meta_dataset, read_covariate_sample, read_meta_dataset, write_covariate_sample,
    sd_to_second_moment, write_effects_csv, write_moments_csv, EffectScale,
};
pub use schema::{Covariate, CovariateKind, CovariateSchema, Stratum, StratumRule, ANY_TRIAL};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read `{path}`: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("unknown level `{level}` for covariate `{covariate}`")]
    UnknownLevel { covariate: String, level: String },
    #[error("stratum `{label}` of `{covariate}` in trial `{trial}` does not resolve to exactly one subgroup definition")]
    UnresolvedStratum { trial: String, covariate: String, label: String },
    #[error("non-numeric value `{value}` in field `{field}`")]
    NonNumeric { field: String, value: String },
    #[error("missing value in column `{column}`")]
    MissingValue { column: String },
    #[error("duplicate effect row for trial `{trial}`, {what}")]
    DuplicateEffect { trial: String, what: String },
    #[error("trial `{0}` has no marginal effect")]
    NoMarginalEffect(String),
    #[error("invalid counts: {0}")]
    InvalidCount(String),
    #[error("invalid moment for trial `{trial}`: {reason}")]
    InvalidMoment { trial: String, reason: String },
    #[error("invalid effect for trial `{trial}`: {reason}")]
    InvalidEffect { trial: String, reason: String },
    #[error("sample size of trial `{0}` is unknown (no moment rows with n and no arm counts)")]
    UnknownTrialSize(String),
    #[error("covariate sample: {0}")]
    Sample(String),
    #[error("no trials in dataset")]
    Empty,
}

/// Which population quantity a reported effect refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectTarget {
    Marginal,
    /// `covariate` indexes the schema; `stratum` indexes the trial's strata
    /// for that covariate (see [`CovariateSchema::strata_for`]).
    Subgroup { covariate: usize, stratum: usize },
}

impl EffectTarget {
    /// 1-based (k, l) pair with (0, 0) for the marginal effect.
    pub fn indices(&self) -> (usize, usize) {
        match *self {
            EffectTarget::Marginal => (0, 0),
            EffectTarget::Subgroup { covariate, stratum } => (covariate + 1, stratum + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub trial: String,
    pub target: EffectTarget,
    /// Risk/mean difference, or a ratio in relative mode.
    pub estimate: f64,
    pub se: f64,
    pub counts: Option<ArmCounts>,
}

impl EffectEstimate {
    pub fn is_marginal(&self) -> bool {
        self.target == EffectTarget::Marginal
    }
}

/// Fixed function `h(x)` whose trial-population mean is reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MomentSpec {
    Mean(usize),
    /// Proportion of rows at a discrete level code.
    Proportion { covariate: usize, level: usize },
    SecondMoment(usize),
}

impl MomentSpec {
    #[inline]
    pub fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            MomentSpec::Mean(k) => row[k],
            MomentSpec::Proportion { covariate, level } => {
                if row[covariate] as usize == level {
                    1.0
                } else {
                    0.0
                }
            }
            MomentSpec::SecondMoment(k) => row[k] * row[k],
        }
    }

    pub fn covariate(&self) -> usize {
        match *self {
            MomentSpec::Mean(k) | MomentSpec::SecondMoment(k) => k,
            MomentSpec::Proportion { covariate, .. } => covariate,
        }
    }

    pub fn describe(&self, schema: &CovariateSchema) -> String {
        match *self {
            MomentSpec::Mean(k) => format!("mean({})", schema.covariate(k).name),
            MomentSpec::Proportion { covariate, level } => {
                let c = schema.covariate(covariate);
                let l = c.levels().map(|l| l[level].clone()).unwrap_or_default();
                format!("prop({}={})", c.name, l)
            }
            MomentSpec::SecondMoment(k) => format!("m2({})", schema.covariate(k).name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub trial: String,
    pub spec: MomentSpec,
    pub value: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialData {
    pub id: String,
    /// Trial sample size n_s.
    pub n: u64,
    /// Marginal effect first, then subgroup effects in input order.
    pub effects: Vec<EffectEstimate>,
    pub moments: Vec<MomentSummary>,
}

impl TrialData {
    pub fn moment_specs(&self) -> Vec<MomentSpec> {
        self.moments.iter().map(|m| m.spec).collect()
    }

    /// `(1, μ̂_s)`.
    pub fn mu_plus(&self) -> Vec<f64> {
        std::iter::once(1.0).chain(self.moments.iter().map(|m| m.value)).collect()
    }
}

/// All aggregate inputs of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    pub schema: CovariateSchema,
    pub trials: Vec<TrialData>,
    /// Non-fatal ingestion notes (e.g. estimate/count inconsistencies).
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Tolerance for `E[x²] ≥ E[x]²` when both are reported.
const SECOND_MOMENT_TOL: f64 = 1e-8;

impl MetaDataset {
    /// Validate and assemble a dataset. Effects are reordered so that each
    /// trial's marginal effect comes first.
    pub fn new(schema: CovariateSchema, mut trials: Vec<TrialData>) -> Result<Self, DataError> {
        if trials.is_empty() {
            return Err(DataError::Empty);
        }
        let mut ids = HashSet::new();
        for t in &mut trials {
            if !ids.insert(t.id.clone()) {
                return Err(DataError::Csv(format!("trial `{}` listed twice", t.id)));
            }
            if t.n == 0 {
                return Err(DataError::UnknownTrialSize(t.id.clone()));
            }
            let mut targets = HashSet::new();
            for e in &t.effects {
                if !targets.insert(e.target) {
                    let (k, l) = e.target.indices();
                    return Err(DataError::DuplicateEffect { trial: t.id.clone(), what: format!("(k, l) = ({k}, {l})") });
                }
                if let EffectTarget::Subgroup { covariate, stratum } = e.target {
                    if covariate >= schema.len() {
                        return Err(DataError::UnknownCovariate(format!("#{covariate}")));
                    }
                    let n_strata = schema.strata_for(&t.id, covariate).map(|s| s.len()).unwrap_or(0);
                    if stratum >= n_strata {
                        return Err(DataError::UnresolvedStratum {
                            trial: t.id.clone(),
                            covariate: schema.covariate(covariate).name.clone(),
                            label: format!("#{stratum}"),
                        });
                    }
                }
                if !e.estimate.is_finite() {
                    return Err(DataError::InvalidEffect { trial: t.id.clone(), reason: "non-finite estimate".into() });
                }
                let degenerate = e.counts.map(|c| c.is_degenerate()).unwrap_or(false);
                if !(e.se > 0.0) && !(e.se == 0.0 && degenerate) {
                    return Err(DataError::InvalidEffect {
                        trial: t.id.clone(),
                        reason: format!("standard error must be positive, got {}", e.se),
                    });
                }
            }
            if !targets.contains(&EffectTarget::Marginal) {
                return Err(DataError::NoMarginalEffect(t.id.clone()));
            }
            t.effects.sort_by_key(|e| !e.is_marginal());
            validate_moments(&schema, t)?;
        }
        Ok(MetaDataset { schema, trials, warnings: Vec::new() })
    }

    /// Total number of reported effects, J = Σ J_s.
    pub fn total_effects(&self) -> usize {
        self.trials.iter().map(|t| t.effects.len()).sum()
    }

    /// Stacked τ̂ in trial order.
    pub fn tau_hat(&self) -> Vec<f64> {
        self.trials.iter().flat_map(|t| t.effects.iter().map(|e| e.estimate)).collect()
    }

    /// Stacked reported standard errors in trial order.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.trials.iter().flat_map(|t| t.effects.iter().map(|e| e.se)).collect()
    }

    /// Row offset of each trial's block in the stacked effect vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.trials.len());
        let mut acc = 0;
        for t in &self.trials {
            off.push(acc);
            acc += t.effects.len();
        }
        off
    }

    pub fn trial(&self, id: &str) -> Option<&TrialData> {
        self.trials.iter().find(|t| t.id == id)
    }

    pub fn trial_ids(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.id.clone()).collect()
    }

    /// Human-readable label of a reported effect.
    pub fn effect_label(&self, e: &EffectEstimate) -> String {
        match e.target {
            EffectTarget::Marginal => format!("{}:overall", e.trial),
            EffectTarget::Subgroup { covariate, stratum } => {
                let name = &self.schema.covariate(covariate).name;
                let label = self
                    .schema
                    .strata_for(&e.trial, covariate)
                    .map(|s| s[stratum].label.clone())
                    .unwrap_or_default();
                format!("{}:{}={}", e.trial, name, label)
            }
        }
    }

    /// Covariate index and membership rule of a subgroup effect; `None` for
    /// the marginal effect.
    pub fn stratum_rule(&self, trial: &str, target: EffectTarget) -> Option<(usize, StratumRule)> {
        match target {
            EffectTarget::Marginal => None,
            EffectTarget::Subgroup { covariate, stratum } => {
                let strata = self.schema.strata_for(trial, covariate)?;
                strata.get(stratum).map(|s| (covariate, s.rule.clone()))
            }
        }
    }

    /// Restrict to a subset of trials (in the given order).
    pub fn subset(&self, ids: &[String]) -> Result<MetaDataset, DataError> {
        let trials = ids
            .iter()
            .map(|id| self.trial(id).cloned().ok_or_else(|| DataError::Csv(format!("unknown trial `{id}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        MetaDataset::new(self.schema.clone(), trials)
    }
}

fn validate_moments(schema: &CovariateSchema, t: &TrialData) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for m in &t.moments {
        let bad = |reason: String| DataError::InvalidMoment { trial: t.id.clone(), reason };
        if !m.value.is_finite() {
            return Err(bad("non-finite value".into()));
        }
        let key = format!("{:?}", m.spec);
        if !seen.insert(key) {
            return Err(bad(format!("{} reported twice", m.spec.describe(schema))));
        }
        let k = m.spec.covariate();
        if k >= schema.len() {
            return Err(DataError::UnknownCovariate(format!("#{k}")));
        }
        match m.spec {
            MomentSpec::Proportion { covariate, level } => {
                let nlev = schema.covariate(covariate).levels().map(|l| l.len()).unwrap_or(0);
                if level >= nlev {
                    return Err(bad(format!("level #{level} of a covariate with {nlev} levels")));
                }
                if !(0.0..=1.0).contains(&m.value) {
                    return Err(bad(format!("proportion {} outside [0, 1]", m.value)));
                }
            }
            MomentSpec::Mean(k) if schema.covariate(k).kind == CovariateKind::Binary => {
                if !(0.0..=1.0).contains(&m.value) {
                    return Err(bad(format!("mean of binary covariate {} outside [0, 1]", m.value)));
                }
            }
            MomentSpec::SecondMoment(k) => {
                if let Some(mean) = t.moments.iter().find(|o| o.spec == MomentSpec::Mean(k)) {
                    let var = m.value - mean.value * mean.value;
                    if var < -SECOND_MOMENT_TOL * m.value.abs().max(1.0) {
                        return Err(bad(format!(
                            "second moment {} below squared mean {}",
                            m.value,
                            mean.value * mean.value
                        )));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Whether a sample plays the role of base distribution Q or target population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleRole {
    Base,
    Target,
}

/// Individual-level covariate rows, coded per the schema (binary 0/1,
/// categorical level index, continuous raw value). Stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSample {
    n_cols: usize,
    data: Vec<f64>,
    pub role: SampleRole,
    /// Outcome column, used only for relative-scale transport.
    pub outcome: Option<Vec<f64>>,
}

impl CovariateSample {
    /// Build from row-major coded values, validating codes against the schema.
    pub fn new(schema: &CovariateSchema, data: Vec<f64>, role: SampleRole) -> Result<Self, DataError> {
        let k = schema.len();
        if k == 0 || !data.len().is_multiple_of(k) {
            return Err(DataError::Sample(format!("{} values do not form rows of {k} covariates", data.len())));
        }
        for row in data.chunks(k) {
            for (j, &v) in row.iter().enumerate() {
                let cov = schema.covariate(j);
                if !v.is_finite() {
                    return Err(DataError::MissingValue { column: cov.name.clone() });
                }
                if let Some(levels) = cov.levels() {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= levels.len() {
                        return Err(DataError::UnknownLevel { covariate: cov.name.clone(), level: format!("{v}") });
                    }
                }
            }
        }
        Ok(CovariateSample { n_cols: k, data, role, outcome: None })
    }

    pub fn with_outcome(mut self, y: Vec<f64>) -> Result<Self, DataError> {
        if y.len() != self.n_rows() {
            return Err(DataError::Sample(format!("{} outcomes for {} rows", y.len(), self.n_rows())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DataError::MissingValue { column: "Y".into() });
        }
        self.outcome = Some(y);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.data.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols)
    }

    pub fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Keep the rows for which `keep` is true.
    pub fn filter_rows(&self, keep: impl Fn(&[f64]) -> bool) -> CovariateSample {
        let mut data = Vec::new();
        let mut y = self.outcome.as_ref().map(|_| Vec::new());
        for (i, r) in self.rows().enumerate() {
            if keep(r) {
                data.extend_from_slice(r);
                if let (Some(out), Some(src)) = (y.as_mut(), self.outcome.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        CovariateSample { n_cols: self.n_cols, data, role: self.role, outcome: y }
    }

    pub fn with_role(mut self, role: SampleRole) -> Self {
        self.role = role;
        self
    }
}
