//! Parametric CATE models `g(x; θ)`.
//!
//! [`CateBasis`] is linear in parameters, `g = θᵀφ(x)`, with features built
//! from a small formula language:
//!
//! ```text
//! ~ 1 + lvef + prehhf + diabetes + lvef:diabetes + cut(lvef, 40) + pow(lvef, 2)
//! ```
//!
//! The intercept is implicit unless `0` or `-1` appears. Categorical main
//! effects expand to treatment-coded dummies, binary covariates enter as 0/1,
//! `cut(x, c)` is `1{x ≤ c}`. Optional follow-up-time strata give each stratum
//! its own intercept (partial) or its own full coefficient block (full).
//!
//! [`LogisticContrast`] is the nonlinear extension point used by the
//! simulation truth, `expit(θ₁ᵀf) − expit(θ₀ᵀf)` with `f = (1, x)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggdata::{CovariateKind, CovariateSchema};
use crate::linalg::expit;

#[derive(Debug, Error)]
pub enum CateError {
    #[error("formula: {0}")]
    Parse(String),
    #[error("unknown covariate `{0}` in formula")]
    UnknownCovariate(String),
    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),
    #[error("expected θ of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("time stratification needs an intercept term")]
    NeedsIntercept,
    #[error("trial `{0}` has no follow-up time")]
    UnknownTrial(String),
    #[error("empty basis")]
    Empty,
}

/// Effect scale of the CATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Additive,
    Relative,
}

/// Parametric CATE interface. `stratum` selects the follow-up-time stratum
/// (always 0 for unstratified models).
pub trait CateModel: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, theta: &[f64], x: &[f64], stratum: usize) -> f64;
    /// `∂g/∂θ` written into `out` (length `dim`).
    fn gradient(&self, theta: &[f64], x: &[f64], stratum: usize, out: &mut [f64]);
    fn is_linear(&self) -> bool;
    fn term_names(&self) -> Vec<String>;
    fn scale(&self) -> Scale;
    /// Time stratum of a trial; `None` when the trial is not mapped.
    fn stratum_for_trial(&self, trial: &str) -> Option<usize>;
    fn n_strata(&self) -> usize {
        1
    }
    /// Point around which iterative fitting linearizes the model.
    fn reference_theta(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), CateError> {
        if theta.len() != self.dim() {
            return Err(CateError::Dimension { expected: self.dim(), got: theta.len() });
        }
        Ok(())
    }
}

/// One factor of a product term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    Value(usize),
    /// Indicator of a categorical level code.
    Level(usize, usize),
    /// `1{x ≤ c}`.
    Cut(usize, f64),
    Pow(usize, i32),
}

impl Factor {
    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Factor::Value(k) => x[k],
            Factor::Level(k, code) => {
                if x[k] as usize == code {
                    1.0
                } else {
                    0.0
                }
            }
            Factor::Cut(k, c) => {
                if x[k] <= c {
                    1.0
                } else {
                    0.0
                }
            }
            Factor::Pow(k, p) => x[k].powi(p),
        }
    }
}

/// Product of factors; the empty product is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn intercept() -> Self {
        Term { name: "(Intercept)".into(), factors: Vec::new() }
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors.iter().map(|f| f.eval(x)).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratification {
    /// Per-stratum intercepts, shared slopes.
    Partial,
    /// Per-stratum copies of every coefficient.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStrata {
    pub labels: Vec<String>,
    pub trial_stratum: BTreeMap<String, usize>,
    pub mode: Stratification,
}

/// Linear-in-parameters basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateBasis {
    pub terms: Vec<Term>,
    pub scale: Scale,
    pub formula: String,
    pub time: Option<TimeStrata>,
}

impl CateBasis {
    /// Intercept plus the main effect of every schema covariate.
    pub fn default_for(schema: &CovariateSchema) -> Self {
        let names: Vec<&str> = schema.covariates().iter().map(|c| c.name.as_str()).collect();
        let formula = format!("~ 1 + {}", names.join(" + "));
        Self::parse(&formula, schema).expect("schema covariates always parse")
    }

    pub fn parse(formula: &str, schema: &CovariateSchema) -> Result<Self, CateError> {
        let body = formula.trim();
        let body = body.strip_prefix('~').unwrap_or(body).trim();
        if body.is_empty() {
            return Err(CateError::Parse("empty formula".into()));
        }
        let mut intercept = true;
        let mut terms: Vec<Term> = Vec::new();
        for (neg, raw) in split_terms(body)? {
            let tok = raw.trim();
            match (neg, tok) {
                (false, "1") => intercept = true,
                (false, "0") | (true, "1") => intercept = false,
                (true, _) => return Err(CateError::Parse(format!("cannot remove term `{tok}`"))),
                (false, _) => terms.extend(parse_term(tok, schema)?),
            }
        }
        if intercept {
            terms.insert(0, Term::intercept());
        }
        if terms.is_empty() {
            return Err(CateError::Empty);
        }
        let mut seen = HashSet::new();
        for t in &terms {
            if !seen.insert(t.name.clone()) {
                return Err(CateError::DuplicateTerm(t.name.clone()));
            }
        }
        Ok(CateBasis { terms, scale: Scale::Additive, formula: formula.trim().to_string(), time: None })
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        self.scale = scale;
        self
    }

    /// Number of base features `p` (before time stratification).
    pub fn n_features(&self) -> usize {
        self.terms.len()
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }

    fn has_leading_intercept(&self) -> bool {
        self.terms.first().is_some_and(Term::is_intercept)
    }

    fn n_time(&self) -> usize {
        self.time.as_ref().map_or(1, |t| t.labels.len())
    }

    /// Write the expanded feature vector for stratum `t` into `out`.
    fn expanded(&self, x: &[f64], t: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.terms.len();
        match &self.time {
            None => {
                for (j, term) in self.terms.iter().enumerate() {
                    out[j] = term.eval(x);
                }
            }
            Some(ts) => match ts.mode {
                Stratification::Partial => {
                    let nt = ts.labels.len();
                    out[t] = 1.0;
                    for (j, term) in self.terms.iter().enumerate().skip(1) {
                        out[nt + j - 1] = term.eval(x);
                    }
                }
                Stratification::Full => {
                    for (j, term) in self.terms.iter().enumerate() {
                        out[t * p + j] = term.eval(x);
                    }
                }
            },
        }
    }
}

fn split_terms(body: &str) -> Result<Vec<(bool, String)>, CateError> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    let mut neg = false;
    for ch in body.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(CateError::Parse("unbalanced parentheses".into()));
                }
                cur.push(ch);
            }
            '+' | '-' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push((neg, cur.trim().to_string()));
                } else if !(out.is_empty() && ch == '-' && !neg) {
                    return Err(CateError::Parse(format!("dangling `{ch}`")));
                }
                cur.clear();
                neg = ch == '-';
            }
            _ => cur.push(ch),
        }
    }
    if depth != 0 {
        return Err(CateError::Parse("unbalanced parentheses".into()));
    }
    if cur.trim().is_empty() {
        return Err(CateError::Parse("formula ends with an operator".into()));
    }
    out.push((neg, cur.trim().to_string()));
    Ok(out)
}

/// A factor with the alternatives it expands to (categorical dummies).
fn parse_factor(tok: &str, schema: &CovariateSchema) -> Result<Vec<(String, Factor)>, CateError> {
    let tok = tok.trim();
    let lookup = |name: &str| {
        let name = name.trim();
        schema.index_of(name).map_err(|_| CateError::UnknownCovariate(name.to_string()))
    };
    let call = |fname: &str| -> Option<(String, String)> {
        let inner = tok.strip_prefix(fname)?.trim_start().strip_prefix('(')?.strip_suffix(')')?;
        let (a, b) = inner.split_once(',')?;
        Some((a.trim().to_string(), b.trim().to_string()))
    };
    if let Some((var, c)) = call("cut") {
        let k = lookup(&var)?;
        let c: f64 = c.parse().map_err(|_| CateError::Parse(format!("bad cutpoint in `{tok}`")))?;
        return Ok(vec![(format!("cut({},{})", schema.covariate(k).name, fmt_num(c)), Factor::Cut(k, c))]);
    }
    if let Some((var, p)) = call("pow") {
        let k = lookup(&var)?;
        let p: i32 = p.parse().map_err(|_| CateError::Parse(format!("bad exponent in `{tok}`")))?;
        return Ok(vec![(format!("pow({},{p})", schema.covariate(k).name), Factor::Pow(k, p))]);
    }
    if tok.contains('(') || tok.is_empty() {
        return Err(CateError::Parse(format!("cannot parse term `{tok}`")));
    }
    let k = lookup(tok)?;
    let cov = schema.covariate(k);
    Ok(match &cov.kind {
        CovariateKind::Categorical { levels } => levels
            .iter()
            .enumerate()
            .skip(1)
            .map(|(code, l)| (format!("{}[{}]", cov.name, l), Factor::Level(k, code)))
            .collect(),
        _ => vec![(cov.name.clone(), Factor::Value(k))],
    })
}

fn parse_term(tok: &str, schema: &CovariateSchema) -> Result<Vec<Term>, CateError> {
    let mut acc: Vec<Term> = vec![Term { name: String::new(), factors: Vec::new() }];
    for part in tok.split(':') {
        let alts = parse_factor(part, schema)?;
        let mut next = Vec::with_capacity(acc.len() * alts.len());
        for t in &acc {
            for (name, f) in &alts {
                let mut factors = t.factors.clone();
                factors.push(f.clone());
                let name = if t.name.is_empty() { name.clone() } else { format!("{}:{}", t.name, name) };
                next.push(Term { name, factors });
            }
        }
        acc = next;
    }
    Ok(acc)
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl CateModel for CateBasis {
    fn dim(&self) -> usize {
        let p = self.terms.len();
        match &self.time {
            None => p,
            Some(ts) => match ts.mode {
                Stratification::Partial => ts.labels.len() + p - 1,
                Stratification::Full => ts.labels.len() * p,
            },
        }
    }

    fn evaluate(&self, theta: &[f64], x: &[f64], stratum: usize) -> f64 {
        let mut phi = vec![0.0; self.dim()];
        self.expanded(x, stratum, &mut phi);
        phi.iter().zip(theta).map(|(a, b)| a * b).sum()
    }

    fn gradient(&self, _theta: &[f64], x: &[f64], stratum: usize, out: &mut [f64]) {
        self.expanded(x, stratum, out);
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn term_names(&self) -> Vec<String> {
        let names: Vec<String> = self.terms.iter().map(|t| t.name.clone()).collect();
        match &self.time {
            None => names,
            Some(ts) => match ts.mode {
                Stratification::Partial => ts
                    .labels
                    .iter()
                    .map(|l| format!("(Intercept)@{l}"))
                    .chain(names.into_iter().skip(1))
                    .collect(),
                Stratification::Full => {
                    ts.labels.iter().flat_map(|l| names.iter().map(move |n| format!("{n}@{l}"))).collect()
                }
            },
        }
    }

    fn scale(&self) -> Scale {
        self.scale
    }

    fn stratum_for_trial(&self, trial: &str) -> Option<usize> {
        match &self.time {
            None => Some(0),
            Some(ts) => ts.trial_stratum.get(trial).copied(),
        }
    }

    fn n_strata(&self) -> usize {
        self.n_time()
    }
}

/// Stratify a basis by follow-up time. Trials sharing a time share a stratum;
/// strata are ordered by label. A single shared time returns the plain basis.
pub fn build_time_stratified(
    basis: &CateBasis,
    followups: &BTreeMap<String, String>,
    trials: &[String],
    mode: Stratification,
) -> Result<CateBasis, CateError> {
    for t in trials {
        if !followups.contains_key(t) {
            return Err(CateError::UnknownTrial(t.clone()));
        }
    }
    let labels: Vec<String> =
        trials.iter().map(|t| followups[t].clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut out = basis.clone();
    out.time = None;
    if labels.len() <= 1 {
        return Ok(out);
    }
    if mode == Stratification::Partial && !basis.has_leading_intercept() {
        return Err(CateError::NeedsIntercept);
    }
    let trial_stratum = trials
        .iter()
        .map(|t| (t.clone(), labels.iter().position(|l| *l == followups[t]).expect("label collected")))
        .collect();
    out.time = Some(TimeStrata { labels, trial_stratum, mode });
    Ok(out)
}

/// `expit(θ₁ᵀf) − expit(θ₀ᵀf)` with `f = (1, x_{k₁}, …)`; θ = (θ₁, θ₀).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticContrast {
    pub covariates: Vec<usize>,
    pub names: Vec<String>,
}

impl LogisticContrast {
    pub fn new(schema: &CovariateSchema) -> Self {
        LogisticContrast {
            covariates: (0..schema.len()).collect(),
            names: schema.covariates().iter().map(|c| c.name.clone()).collect(),
        }
    }

    fn p(&self) -> usize {
        self.covariates.len() + 1
    }

    fn lin(&self, coef: &[f64], x: &[f64]) -> f64 {
        coef[0] + self.covariates.iter().zip(&coef[1..]).map(|(&k, c)| c * x[k]).sum::<f64>()
    }
}

impl CateModel for LogisticContrast {
    fn dim(&self) -> usize {
        2 * self.p()
    }

    fn evaluate(&self, theta: &[f64], x: &[f64], _stratum: usize) -> f64 {
        let p = self.p();
        expit(self.lin(&theta[..p], x)) - expit(self.lin(&theta[p..], x))
    }

    fn gradient(&self, theta: &[f64], x: &[f64], _stratum: usize, out: &mut [f64]) {
        let p = self.p();
        let e1 = expit(self.lin(&theta[..p], x));
        let e0 = expit(self.lin(&theta[p..], x));
        let (d1, d0) = (e1 * (1.0 - e1), -e0 * (1.0 - e0));
        out[0] = d1;
        out[p] = d0;
        for (j, &k) in self.covariates.iter().enumerate() {
            out[j + 1] = d1 * x[k];
            out[p + j + 1] = d0 * x[k];
        }
    }

    fn is_linear(&self) -> bool {
        false
    }

    fn term_names(&self) -> Vec<String> {
        let base: Vec<String> = std::iter::once("(Intercept)".to_string()).chain(self.names.iter().cloned()).collect();
        base.iter().map(|n| format!("treated:{n}")).chain(base.iter().map(|n| format!("control:{n}"))).collect()
    }

    fn scale(&self) -> Scale {
        Scale::Additive
    }

    fn stratum_for_trial(&self, _trial: &str) -> Option<usize> {
        Some(0)
    }

    /// Equal arms at a baseline risk of `expit(−1)`; at θ = 0 the treated and
    /// control gradients are exact negatives and Gauss–Newton cannot separate them.
    fn reference_theta(&self) -> Vec<f64> {
        let p = self.p();
        let mut theta = vec![0.0; 2 * p];
        theta[0] = -1.0;
        theta[p] = -1.0;
        theta
    }
}

/// Serializable choice of CATE model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CateSpec {
    Basis(CateBasis),
    LogisticContrast(LogisticContrast),
}

impl CateSpec {
    fn inner(&self) -> &dyn CateModel {
        match self {
            CateSpec::Basis(b) => b,
            CateSpec::LogisticContrast(l) => l,
        }
    }
}

impl CateModel for CateSpec {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn evaluate(&self, theta: &[f64], x: &[f64], stratum: usize) -> f64 {
        self.inner().evaluate(theta, x, stratum)
    }
    fn gradient(&self, theta: &[f64], x: &[f64], stratum: usize, out: &mut [f64]) {
        self.inner().gradient(theta, x, stratum, out)
    }
    fn is_linear(&self) -> bool {
        self.inner().is_linear()
    }
    fn term_names(&self) -> Vec<String> {
        self.inner().term_names()
    }
    fn scale(&self) -> Scale {
        self.inner().scale()
    }
    fn stratum_for_trial(&self, trial: &str) -> Option<usize> {
        self.inner().stratum_for_trial(trial)
    }
    fn n_strata(&self) -> usize {
        self.inner().n_strata()
    }
    fn reference_theta(&self) -> Vec<f64> {
        self.inner().reference_theta()
    }
}

impl From<CateBasis> for CateSpec {
    fn from(b: CateBasis) -> Self {
        CateSpec::Basis(b)
    }
}

impl From<LogisticContrast> for CateSpec {
    fn from(l: LogisticContrast) -> Self {
        CateSpec::LogisticContrast(l)
    }
}

/// Checked evaluation.
pub fn evaluate(model: &dyn CateModel, theta: &[f64], x: &[f64]) -> Result<f64, CateError> {
    model.check_theta(theta)?;
    Ok(model.evaluate(theta, x, 0))
}

/// Checked gradient.
pub fn gradient(model: &dyn CateModel, theta: &[f64], x: &[f64]) -> Result<Vec<f64>, CateError> {
    model.check_theta(theta)?;
    let mut out = vec![0.0; model.dim()];
    model.gradient(theta, x, 0, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggdata::Covariate;

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            Covariate::continuous("lvef"),
            Covariate::binary("prehhf"),
            Covariate::categorical("nyha", &["I", "II", "III"]),
        ])
        .unwrap()
    }

    #[test]
    fn parses_terms() {
        let b = CateBasis::parse("~ 1 + lvef + prehhf + nyha + lvef:prehhf + cut(lvef, 40) + pow(lvef, 2)", &schema())
            .unwrap();
        assert_eq!(
            b.term_names(),
            vec!["(Intercept)", "lvef", "prehhf", "nyha[II]", "nyha[III]", "lvef:prehhf", "cut(lvef,40)", "pow(lvef,2)"]
        );
        let x = [35.0, 1.0, 2.0];
        assert_eq!(b.features(&x), vec![1.0, 35.0, 1.0, 0.0, 1.0, 35.0, 1.0, 1225.0]);
    }

    #[test]
    fn intercept_can_be_removed() {
        let b = CateBasis::parse("~ 0 + lvef", &schema()).unwrap();
        assert_eq!(b.dim(), 1);
        let b = CateBasis::parse("~ lvef - 1", &schema()).unwrap();
        assert_eq!(b.dim(), 1);
        let b = CateBasis::parse("~ lvef", &schema()).unwrap();
        assert_eq!(b.dim(), 2);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(CateBasis::parse("~ 1 + bmi", &schema()), Err(CateError::UnknownCovariate(_))));
        assert!(matches!(CateBasis::parse("~ lvef + lvef", &schema()), Err(CateError::DuplicateTerm(_))));
        assert!(CateBasis::parse("~ 1 + cut(lvef)", &schema()).is_err());
        assert!(CateBasis::parse("~ 1 +", &schema()).is_err());
    }

    #[test]
    fn linear_arithmetic() {
        let s = CovariateSchema::new(vec![Covariate::binary("x1")]).unwrap();
        let b = CateBasis::parse("~ 1 + x1", &s).unwrap();
        assert!((evaluate(&b, &[0.1, -0.2], &[1.0]).unwrap() + 0.1).abs() < 1e-15);
        assert!(matches!(evaluate(&b, &[0.1], &[1.0]), Err(CateError::Dimension { .. })));
        let c = CateBasis::parse("~ 1", &s).unwrap();
        assert_eq!(evaluate(&c, &[-0.048], &[0.0]).unwrap(), -0.048);
    }

    #[test]
    fn time_strata_dimensions() {
        let s = CovariateSchema::new(vec![Covariate::binary("x1")]).unwrap();
        let b = CateBasis::parse("~ 1 + x1", &s).unwrap();
        let trials: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
        let f: BTreeMap<String, String> =
            [("A", "12m"), ("B", "24m"), ("C", "12m")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let partial = build_time_stratified(&b, &f, &trials, Stratification::Partial).unwrap();
        assert_eq!(partial.dim(), 3);
        assert_eq!(partial.stratum_for_trial("B"), Some(1));
        let full = build_time_stratified(&b, &f, &trials, Stratification::Full).unwrap();
        assert_eq!(full.dim(), 4);
        let mut g = vec![0.0; 3];
        partial.gradient(&[0.0; 3], &[1.0], 0, &mut g);
        assert_eq!(g, vec![1.0, 0.0, 1.0]);

        let same: BTreeMap<String, String> = trials.iter().map(|t| (t.clone(), "12m".to_string())).collect();
        assert_eq!(build_time_stratified(&b, &same, &trials, Stratification::Full).unwrap(), b);
        let mut missing = f.clone();
        missing.remove("C");
        assert!(matches!(
            build_time_stratified(&b, &missing, &trials, Stratification::Full),
            Err(CateError::UnknownTrial(_))
        ));
    }

    #[test]
    fn logistic_contrast_matches_direct_arithmetic() {
        let s = CovariateSchema::new(vec![Covariate::binary("x1"), Covariate::continuous("x3")]).unwrap();
        let m = LogisticContrast::new(&s);
        let th = [0.5f64.ln(), 2f64.ln(), 1.25f64.ln(), 0.5f64.ln(), 0.5f64.ln(), 0.8f64.ln()];
        let x = [1.0, -0.7];
        let direct = 1.0 / (1.0 + (-(th[0] + th[1] + th[2] * -0.7)).exp())
            - 1.0 / (1.0 + (-(th[3] + th[4] + th[5] * -0.7)).exp());
        assert!((m.evaluate(&th, &x, 0) - direct).abs() < 1e-12);
    }
}
