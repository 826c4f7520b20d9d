//! Human-readable renderings of fits, estimates and metrics.

use std::fmt::Write;

use aggcate::aggdata::MetaDataset;
use aggcate::cate::{CateModel, CateSpec};
use aggcate::estimands::TransportResult;
use aggcate::gmm::CateFit;
use aggcate::simulate::MetricsRow;

pub fn dimensions(ds: &MetaDataset, model: &CateSpec) -> String {
    let mut s = String::new();
    let j = ds.total_effects();
    let d = model.dim();
    for t in &ds.trials {
        let _ = writeln!(s, "trial {:<24} n = {:<7} effects J_s = {:<3} moments R_s = {}", t.id, t.n, t.effects.len(), t.moments.len());
    }
    let _ = writeln!(s, "moment system: J = {j}, d = {d}, trials = {}, overidentification df = {}", ds.trials.len(), j as i64 - d as i64);
    let _ = writeln!(s, "terms: {}", model.term_names().join(", "));
    s
}

pub fn fit_text(fit: &CateFit) -> String {
    let mut s = String::new();
    let se = fit.se_theta();
    let _ = writeln!(s, "CATE fit: {} moments, {} parameters, trials {}", fit.moment_labels.len(), fit.theta.len(), fit.trials.join(", "));
    let _ = writeln!(s, "weighting: {:?} (used {:?}), iterations {}", fit.weighting, fit.weighting_used, fit.iterations);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<24} {:>14} {:>14}", "term", "estimate", "se");
    for (k, name) in fit.term_names.iter().enumerate() {
        let _ = writeln!(s, "{:<24} {:>14.6} {:>14.6}", name, fit.theta[k], se[k]);
    }
    let _ = writeln!(s);
    match fit.j_statistic {
        Some(j) => {
            let _ = writeln!(s, "J statistic: {j:.4} on {} df", fit.j_df);
        }
        None => {
            let _ = writeln!(s, "J statistic: not available (df {})", fit.j_df);
        }
    }
    let _ = writeln!(s, "rank ratio: {:.3e} (threshold {:.0e})", fit.rank.ratio, fit.rank.threshold);
    let _ = writeln!(s, "first-order condition: {:.3e}", fit.first_order);
    let _ = writeln!(s, "variance share: base {:.3}, trials {:?}", fit.variance.share_base, fit.variance.share_trials);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<24} {:>12} {:>6}", "tilt", "residual", "iter");
    for t in &fit.tilts {
        let _ = writeln!(s, "{:<24} {:>12.2e} {:>6}", t.trial, t.residual_norm, t.iterations);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<40} {:>12}", "moment", "residual");
    for (l, r) in fit.moment_labels.iter().zip(&fit.moment_residuals) {
        let _ = writeln!(s, "{:<40} {:>12.6}", l, r);
    }
    if !fit.warnings.is_empty() {
        let _ = writeln!(s);
        for w in &fit.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

pub fn results_table(results: &[TransportResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<40} {:>10} {:>10} {:>22} {:>10}", "estimand", "estimate", "se", "95% CI", "n");
    for r in results {
        let ci = format!("({:.3}, {:.3})", r.ci95.0, r.ci95.1);
        let _ = writeln!(s, "{:<40} {:>10.4} {:>10.4} {:>22} {:>10}", r.label, r.psi_hat, r.se, ci, r.n_effective);
    }
    s
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<7} {:>4} {:<8} {:>5} {:>5} {:>9} {:>9} {:>9} {:>8}",
        "set", "id", "method", "reps", "fail", "bias", "variance", "mse", "coverage"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<7} {:>4} {:<8} {:>5} {:>5} {:>9.4} {:>9.5} {:>9.5} {:>8.3}{}",
            r.set,
            r.scenario,
            r.method.as_str(),
            r.replications,
            r.failures,
            r.bias,
            r.variance,
            r.mse,
            r.coverage,
            if r.flagged { "  flagged" } else { "" }
        );
    }
    s
}
