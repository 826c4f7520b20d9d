//! Marginalization of fitted CATEs over a target sample.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggdata::{CovariateKind, CovariateSample, CovariateSchema};
use crate::cate::{CateError, CateModel, Scale};
use crate::glm::{self, GlmError};
use crate::gmm::CateFit;
use crate::inference::wald_ci;
use crate::linalg::{expit, quad_form};

#[derive(Debug, Error)]
pub enum EstimandError {
    #[error("empty target sample")]
    EmptyTarget,
    #[error("no target row matches subgroup `{0}`")]
    EmptySubgroup(String),
    #[error("subgroup filter: {0}")]
    Filter(String),
    #[error("target sample has {got} columns, the fit's schema has {expected}")]
    TargetShape { expected: usize, got: usize },
    #[error("relative-scale transport needs an outcome column Y in the target sample")]
    MissingOutcome,
    #[error("fits share trials {0:?}; independent fits are required for indirect comparison")]
    OverlappingTrials(Vec<String>),
    #[error("fits were estimated on different covariate schemas")]
    SchemaMismatch,
    #[error("model scale is {0:?}, expected {1:?}")]
    WrongScale(Scale, Scale),
    #[error(transparent)]
    Model(#[from] CateError),
    #[error("control-outcome model: {0}")]
    Glm(#[from] GlmError),
}

impl EstimandError {
    pub fn is_input_error(&self) -> bool {
        !matches!(self, EstimandError::Glm(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    pub label: String,
    pub psi_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub n_effective: usize,
}

impl TransportResult {
    fn new(label: String, psi_hat: f64, var: f64, n_effective: usize) -> Self {
        let se = var.max(0.0).sqrt();
        TransportResult { label, psi_hat, se, ci95: wald_ci(psi_hat, se), n_effective }
    }
}

/// Follow-up-time stratum used for the target (0 for unstratified models).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportOptions {
    pub stratum: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Le,
    Lt,
    Ge,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub covariate: usize,
    pub op: CmpOp,
    pub value: f64,
}

/// Conjunction of covariate conditions, e.g. `lvef<=40,prehhf=yes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub text: String,
    pub conditions: Vec<Condition>,
}

impl Filter {
    pub fn parse(text: &str, schema: &CovariateSchema) -> Result<Self, EstimandError> {
        let mut conditions = Vec::new();
        for part in text.split([',', '&']).map(str::trim).filter(|p| !p.is_empty()) {
            let ops = [("<=", CmpOp::Le), (">=", CmpOp::Ge), ("!=", CmpOp::Ne), ("==", CmpOp::Eq), ("<", CmpOp::Lt), (">", CmpOp::Gt), ("=", CmpOp::Eq)];
            let (pos, sym, op) = ops
                .iter()
                .filter_map(|(sym, op)| part.find(sym).map(|p| (p, *sym, *op)))
                .min_by_key(|(p, sym, _)| (*p, std::cmp::Reverse(sym.len())))
                .ok_or_else(|| EstimandError::Filter(format!("no comparison in `{part}`")))?;
            let name = part[..pos].trim();
            let raw = part[pos + sym.len()..].trim();
            let k = schema.index_of(name).map_err(|e| EstimandError::Filter(e.to_string()))?;
            let cov = schema.covariate(k);
            let value = match (&cov.kind, op) {
                (CovariateKind::Continuous, _) => raw
                    .parse::<f64>()
                    .map_err(|_| EstimandError::Filter(format!("`{raw}` is not a number")))?,
                (_, CmpOp::Eq | CmpOp::Ne) => cov
                    .level_code(raw)
                    .ok_or_else(|| EstimandError::Filter(format!("unknown level `{raw}` of `{name}`")))?
                    as f64,
                _ => return Err(EstimandError::Filter(format!("ordering comparison on discrete `{name}`"))),
            };
            conditions.push(Condition { covariate: k, op, value });
        }
        if conditions.is_empty() {
            return Err(EstimandError::Filter(format!("empty filter `{text}`")));
        }
        Ok(Filter { text: text.trim().to_string(), conditions })
    }

    pub fn matches(&self, x: &[f64]) -> bool {
        self.conditions.iter().all(|c| {
            let v = x[c.covariate];
            match c.op {
                CmpOp::Eq => v == c.value,
                CmpOp::Ne => v != c.value,
                CmpOp::Le => v <= c.value,
                CmpOp::Lt => v < c.value,
                CmpOp::Ge => v >= c.value,
                CmpOp::Gt => v > c.value,
            }
        })
    }
}

fn check_target(fit: &CateFit, target: &CovariateSample) -> Result<(), EstimandError> {
    if target.n_rows() == 0 {
        return Err(EstimandError::EmptyTarget);
    }
    if target.n_cols() != fit.schema.len() {
        return Err(EstimandError::TargetShape { expected: fit.schema.len(), got: target.n_cols() });
    }
    Ok(())
}

/// `g` and mean gradient `J^ψ_θ` over the given rows.
fn marginalize<'a>(
    fit: &CateFit,
    rows: impl Iterator<Item = &'a [f64]>,
    weight: impl Fn(usize) -> f64,
    stratum: usize,
) -> (Vec<f64>, DVector<f64>) {
    let d = fit.theta.len();
    let mut g = Vec::new();
    let mut grad_sum = DVector::zeros(d);
    let mut buf = vec![0.0; d];
    for (i, x) in rows.enumerate() {
        let b = weight(i);
        g.push(fit.model.evaluate(&fit.theta, x, stratum) * b);
        fit.model.gradient(&fit.theta, x, stratum, &mut buf);
        for (s, v) in grad_sum.iter_mut().zip(&buf) {
            *s += v * b;
        }
    }
    let n = g.len().max(1) as f64;
    (g, grad_sum / n)
}

fn mean_and_ss(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>())
}

/// `ψ̂ = mean g` with `Var = n₀⁻² Σ(g − ψ̂)² + J^ψ Var(θ̂) J^ψᵀ`.
pub fn transport_ate(fit: &CateFit, target: &CovariateSample, opts: TransportOptions) -> Result<TransportResult, EstimandError> {
    check_target(fit, target)?;
    transport_rows(fit, target, None, "overall".into(), opts)
}

fn transport_rows(
    fit: &CateFit,
    target: &CovariateSample,
    filter: Option<&Filter>,
    label: String,
    opts: TransportOptions,
) -> Result<TransportResult, EstimandError> {
    let keep = |x: &[f64]| filter.is_none_or(|f| f.matches(x));
    let (g, jpsi) = marginalize(fit, target.rows().filter(|x| keep(x)), |_| 1.0, opts.stratum);
    if g.is_empty() {
        return Err(EstimandError::EmptySubgroup(label));
    }
    let n0 = g.len() as f64;
    let (psi, ss) = mean_and_ss(&g);
    let var = ss / (n0 * n0) + quad_form(&jpsi, &fit.var_theta_matrix());
    Ok(TransportResult::new(label, psi, var, g.len()))
}

/// ATE over the target rows matching `filter`.
pub fn subgroup_ate(
    fit: &CateFit,
    target: &CovariateSample,
    filter: &Filter,
    opts: TransportOptions,
) -> Result<TransportResult, EstimandError> {
    check_target(fit, target)?;
    transport_rows(fit, target, Some(filter), filter.text.clone(), opts)
}

fn same_fit(a: &CateFit, b: &CateFit) -> bool {
    a.model == b.model && a.theta == b.theta && a.trials == b.trials && a.var_theta == b.var_theta
}

/// `ψ̂¹² = mean(g₂ − g₁)`; the two fits must come from disjoint trial sets.
/// A fit compared with itself yields exactly 0 with zero standard error.
pub fn indirect_comparison(
    fit1: &CateFit,
    fit2: &CateFit,
    target: &CovariateSample,
    opts: TransportOptions,
) -> Result<TransportResult, EstimandError> {
    if fit1.schema != fit2.schema {
        return Err(EstimandError::SchemaMismatch);
    }
    check_target(fit1, target)?;
    if same_fit(fit1, fit2) {
        return Ok(TransportResult::new("indirect".into(), 0.0, 0.0, target.n_rows()));
    }
    let shared: Vec<String> = fit1.trials.iter().filter(|t| fit2.trials.contains(t)).cloned().collect();
    if !shared.is_empty() {
        return Err(EstimandError::OverlappingTrials(shared));
    }
    let (g1, j1) = marginalize(fit1, target.rows(), |_| 1.0, opts.stratum);
    let (g2, j2) = marginalize(fit2, target.rows(), |_| 1.0, opts.stratum);
    let diff: Vec<f64> = g2.iter().zip(&g1).map(|(b, a)| b - a).collect();
    let n0 = diff.len() as f64;
    let (psi, ss) = mean_and_ss(&diff);
    let var = ss / (n0 * n0) + quad_form(&j1, &fit1.var_theta_matrix()) + quad_form(&j2, &fit2.var_theta_matrix());
    Ok(TransportResult::new("indirect".into(), psi, var, diff.len()))
}

/// Control-outcome function `b₀(x) = expit(βᵀ(1, x))` fitted on the target.
pub fn fit_control_outcome(target: &CovariateSample) -> Result<DVector<f64>, EstimandError> {
    let y = target.outcome.as_ref().ok_or(EstimandError::MissingOutcome)?;
    let n = target.n_rows();
    let p = target.n_cols() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { target.row(i)[j - 1] });
    Ok(glm::fit_logistic(&x, y)?.beta)
}

/// `ψ̂ = mean(g b₀) − mean(Y)` for a relative-scale fit. `b₀` is treated as
/// fixed in the variance.
pub fn transport_relative(
    fit: &CateFit,
    target: &CovariateSample,
    b0: Option<&dyn Fn(&[f64]) -> f64>,
    opts: TransportOptions,
) -> Result<TransportResult, EstimandError> {
    check_target(fit, target)?;
    if fit.model.scale() != Scale::Relative {
        return Err(EstimandError::WrongScale(fit.model.scale(), Scale::Relative));
    }
    let y = target.outcome.as_ref().ok_or(EstimandError::MissingOutcome)?;
    let b: Vec<f64> = match b0 {
        Some(f) => target.rows().map(f).collect(),
        None => {
            let beta = fit_control_outcome(target)?;
            target
                .rows()
                .map(|x| expit(beta[0] + x.iter().zip(beta.iter().skip(1)).map(|(a, c)| a * c).sum::<f64>()))
                .collect()
        }
    };
    log::info!("relative-scale variance treats b0 as known");
    let (gb, jpsi) = marginalize(fit, target.rows(), |i| b[i], opts.stratum);
    let contrib: Vec<f64> = gb.iter().zip(y).map(|(a, yi)| a - yi).collect();
    let n0 = contrib.len() as f64;
    let (psi, ss) = mean_and_ss(&contrib);
    let var = ss / (n0 * n0) + quad_form(&jpsi, &fit.var_theta_matrix());
    Ok(TransportResult::new("relative".into(), psi, var, contrib.len()))
}

/// Write `label,estimate,se,ci_lo,ci_hi,n_effective`.
pub fn write_results_csv<W: Write>(results: &[TransportResult], w: W) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["label", "estimate", "se", "ci_lo", "ci_hi", "n_effective"])?;
    for r in results {
        wtr.write_record([
            r.label.clone(),
            format!("{}", r.psi_hat),
            format!("{}", r.se),
            format!("{}", r.ci95.0),
            format!("{}", r.ci95.1),
            r.n_effective.to_string(),
        ])?;
    }
    wtr.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggdata::Covariate;

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![Covariate::continuous("lvef"), Covariate::binary("prehhf")]).unwrap()
    }

    #[test]
    fn filter_parsing() {
        let f = Filter::parse("lvef<=40, prehhf=yes", &schema()).unwrap();
        assert_eq!(f.conditions.len(), 2);
        assert_eq!(f.conditions[0].op, CmpOp::Le);
        assert!(f.matches(&[40.0, 1.0]));
        assert!(!f.matches(&[40.5, 1.0]));
        assert!(!f.matches(&[30.0, 0.0]));
        let g = Filter::parse("lvef>40", &schema()).unwrap();
        assert_eq!(g.conditions[0].op, CmpOp::Gt);
        assert!(Filter::parse("prehhf<1", &schema()).is_err());
        assert!(Filter::parse("bmi=3", &schema()).is_err());
        assert!(Filter::parse("", &schema()).is_err());
    }
}
