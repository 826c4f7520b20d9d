//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test -p aggcate-validation --test acceptance -- 3 4`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use aggcate::aggdata::{risk_difference_from_counts, CovariateSample, MetaDataset, SampleRole};
use aggcate::cate::{self, CateBasis, CateModel, CateSpec};
use aggcate::estimands::{indirect_comparison, transport_ate, TransportOptions};
use aggcate::gmm::{self, build_system, compute_jacobians, CateFit, FitOptions, MomentSystem, SystemOptions, Weighting};
use aggcate::par::{self, Parallelism};
use aggcate::simulate::{run_study, scenario_set, Method, MetricsRow, StudyConfig};
use aggcate::tilting::{self, solve_tilt, TiltConfig, TiltError};
use aggcate_validation::designs::{
    enumeration_support, eval_spec, exact_trial, feasible_tilt_case, infeasible_tilt_cases, jacobian_config,
    linear_cate, xyz_schema, CalibrationDesign, EnumTrial, JacobianConfig,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "ingestion fidelity", ingestion_fidelity),
        (2, "tilting exactness", tilting_exactness),
        (3, "oracle recovery", oracle_recovery),
        (4, "jacobian correctness", jacobian_correctness),
        (5, "variance calibration", variance_calibration),
        (6, "simulation, 5-trial", simulation_five_trial),
        (7, "simulation, single-trial", simulation_single_trial),
        (8, "application", application),
        (9, "indirect comparison", indirect),
        (10, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn sequential() -> SystemOptions {
    SystemOptions { parallelism: Parallelism::Sequential, ..Default::default() }
}

fn fit_with(system: &MomentSystem, weighting: Weighting) -> CateFit {
    gmm::fit(system, &FitOptions { weighting, ..Default::default() }).expect("fit")
}

// ---------------------------------------------------------------- 1

/// Published event counts with the published (estimate, se) per row.
const TABLE: [(&str, &str, u64, u64, u64, u64, f64, f64); 26] = [
    ("EMPEROR-Preserved", "overall", 415, 2997, 511, 2991, -0.032, 0.009),
    ("EMPEROR-Preserved", "lvef 40-49", 145, 995, 193, 988, -0.050, 0.017),
    ("EMPEROR-Preserved", "lvef 50-59", 138, 1028, 173, 1030, -0.034, 0.016),
    ("EMPEROR-Preserved", "lvef >=60", 132, 974, 145, 973, -0.014, 0.016),
    ("EMPEROR-Preserved", "prehhf yes", 157, 699, 192, 670, -0.062, 0.023),
    ("EMPEROR-Preserved", "prehhf no", 258, 2298, 319, 2321, -0.025, 0.009),
    ("EMPEROR-Preserved", "diabetes yes", 239, 1466, 291, 1472, -0.035, 0.014),
    ("EMPEROR-Preserved", "diabetes no", 176, 1531, 220, 1519, -0.030, 0.012),
    ("DELIVER", "overall", 475, 3131, 577, 3132, -0.033, 0.009),
    ("DELIVER", "lvef 40-49", 193, 1067, 220, 1049, -0.029, 0.017),
    ("DELIVER", "lvef 50-59", 161, 1133, 196, 1123, -0.032, 0.015),
    ("DELIVER", "lvef >=60", 121, 931, 161, 960, -0.038, 0.016),
    ("DELIVER", "prehhf yes", 184, 829, 230, 805, -0.064, 0.021),
    ("DELIVER", "prehhf no", 291, 2302, 347, 2327, -0.023, 0.010),
    ("DELIVER", "diabetes yes", 248, 1401, 298, 1405, -0.035, 0.015),
    ("DELIVER", "diabetes no", 227, 1730, 279, 1727, -0.030, 0.012),
    ("DAPA-HF", "overall", 382, 2373, 495, 2371, -0.048, 0.011),
    ("DAPA-HF", "prehhf yes", 117, 638, 181, 663, -0.089, 0.023),
    ("DAPA-HF", "prehhf no", 265, 1735, 314, 1708, -0.031, 0.013),
    ("DAPA-HF", "diabetes yes", 213, 1075, 268, 1064, -0.054, 0.018),
    ("DAPA-HF", "diabetes no", 169, 1298, 227, 1307, -0.043, 0.014),
    ("EMPEROR-Reduced", "overall", 361, 1863, 462, 1867, -0.054, 0.014),
    ("EMPEROR-Reduced", "prehhf yes", 153, 577, 177, 574, -0.043, 0.027),
    ("EMPEROR-Reduced", "prehhf no", 208, 1286, 285, 1293, -0.058, 0.015),
    ("EMPEROR-Reduced", "diabetes yes", 200, 927, 265, 929, -0.070, 0.020),
    ("EMPEROR-Reduced", "diabetes no", 161, 936, 197, 938, -0.038, 0.018),
];

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn ingestion_fidelity() -> Verdict {
    let tol = 0.0005 + 1e-12;
    let mut bad = Vec::new();
    for (trial, row, e1, n1, e0, n0, est, se) in TABLE {
        let (rd, s) = risk_difference_from_counts(e1, n1, e0, n0).expect("valid counts");
        let de = (round3(rd) - est).abs();
        let ds = (round3(s) - se).abs();
        if de > tol || ds > tol {
            bad.push(format!("{trial} {row}: computed ({rd:.5}, {s:.5}) vs published ({est}, {se})"));
        }
    }
    let matched = TABLE.len() - bad.len();
    let mut detail = format!("{matched}/{} rows within ±0.0005 after rounding to 3 decimals", TABLE.len());
    if !bad.is_empty() {
        detail.push_str(&format!("; mismatches: {}", bad.join("; ")));
    }
    verdict(bad.is_empty(), detail)
}

// ---------------------------------------------------------------- 2

fn tilting_exactness() -> Verdict {
    let n = 10_000;
    let results = par::map_range(50, Parallelism::Parallel, |k| {
        let case = feasible_tilt_case(1000 + k as u64, n);
        let fit = match solve_tilt(&case.base, &case.specs, &case.mu_plus, &TiltConfig::default()) {
            Ok(f) => f,
            Err(e) => return Err(format!("{}: {e}", case.label)),
        };
        let nf = n as f64;
        let mean_w = fit.weights.iter().sum::<f64>() / nf;
        let mut resid = (mean_w - 1.0).abs();
        for (r, spec) in case.specs.iter().enumerate() {
            let achieved = case.base.rows().zip(&fit.weights).map(|(x, w)| w * eval_spec(spec, x)).sum::<f64>() / nf;
            resid = resid.max((achieved - case.mu_plus[r + 1]).abs());
        }
        Ok((resid, (mean_w - 1.0).abs(), case.specs.len()))
    });
    let mut worst_resid = 0.0f64;
    let mut worst_w = 0.0f64;
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok((res, w, _)) => {
                worst_resid = worst_resid.max(res);
                worst_w = worst_w.max(w);
            }
            Err(e) => errors.push(e),
        }
    }
    let mut flagged = 0;
    let mut missed = Vec::new();
    let infeasible = infeasible_tilt_cases(n);
    for case in &infeasible {
        match solve_tilt(&case.base, &case.specs, &case.mu_plus, &TiltConfig::default()) {
            Err(TiltError::InfeasibleMoments { .. }) => flagged += 1,
            Err(e) => missed.push(format!("{}: {e}", case.label)),
            Ok(_) => missed.push(format!("{}: solved", case.label)),
        }
    }
    let pass = errors.is_empty() && worst_resid <= 1e-9 && worst_w <= 1e-10 && missed.is_empty();
    let mut detail = format!(
        "50 feasible cases: max residual {worst_resid:.2e} (≤ 1e-9), max |mean w − 1| {worst_w:.2e} (≤ 1e-10); {flagged}/{} infeasible cases flagged",
        infeasible.len()
    );
    for e in errors.iter().chain(&missed) {
        detail.push_str(&format!("; {e}"));
    }
    verdict(pass, detail)
}

// ---------------------------------------------------------------- 3

const THETA0: [f64; 4] = [-0.04, 0.025, -0.015, 0.01];
const ETAS: [[f64; 3]; 4] = [[0.4, -0.3, 0.2], [-0.5, 0.6, -0.3], [0.2, 0.3, 0.5], [-0.2, -0.4, 0.35]];

fn enum_dataset(trials: &[EnumTrial], theta: &[f64]) -> (MetaDataset, CovariateSample) {
    let (law, counts) = enumeration_support();
    let schema = xyz_schema();
    let g = linear_cate(theta);
    let data = trials.iter().map(|t| exact_trial(&law, t, &g)).collect();
    let ds = MetaDataset::new(schema.clone(), data).expect("dataset");
    let base = CovariateSample::new(&schema, law.replicate(&counts), SampleRole::Base).expect("base");
    (ds, base)
}

fn enum_trial(id: &str, eta: [f64; 3], subgroups: &[(usize, usize)]) -> EnumTrial {
    EnumTrial { id: id.into(), n: 2000, eta, subgroups: subgroups.to_vec() }
}

fn xyz_basis() -> CateSpec {
    CateBasis::parse("~ 1 + x1 + x2 + x3", &xyz_schema()).unwrap().into()
}

fn oracle_recovery() -> Verdict {
    let all = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)];
    let designs = [
        (
            "just-identified (J = 4)",
            vec![enum_trial("T1", ETAS[0], &[(0, 1)]), enum_trial("T2", ETAS[1], &[]), enum_trial("T3", ETAS[2], &[])],
        ),
        (
            "overidentified (J = 15)",
            vec![
                enum_trial("T1", ETAS[0], &all),
                enum_trial("T2", ETAS[1], &[(0, 0), (0, 1), (2, 0), (2, 1)]),
                enum_trial("T3", ETAS[2], &[(1, 0), (1, 1)]),
            ],
        ),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, trials) in &designs {
        let (ds, base) = enum_dataset(trials, &THETA0);
        let system = build_system(xyz_basis(), ds, base, &sequential(), None).expect("system");
        for w in [Weighting::Identity, Weighting::InverseSe2, Weighting::TwoStep] {
            let fit = fit_with(&system, w);
            let err = fit.theta.iter().zip(&THETA0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            parts.push(format!("{name} {w:?} {err:.1e}"));
        }
    }
    verdict(worst <= 1e-6, format!("max ‖θ̂ − θ₀‖∞ = {worst:.2e} (≤ 1e-6); {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 4

/// `M(θ)` from representer values and the CATE, column by column.
fn moments_oracle(system: &MomentSystem, reps: &DMatrix<f64>, theta: &[f64], tau: &[f64]) -> Vec<f64> {
    let n = system.base.n_rows() as f64;
    let g: Vec<f64> = system.base.rows().map(|x| system.model.evaluate(theta, x, 0)).collect();
    (0..reps.ncols()).map(|j| reps.column(j).iter().zip(&g).map(|(a, gi)| a * gi).sum::<f64>() / n - tau[j]).collect()
}

/// Undamped Gauss–Newton on `diag(1/se) M(θ)` run to machine precision.
fn polish(system: &MomentSystem, reps: &DMatrix<f64>, mut theta: Vec<f64>) -> Vec<f64> {
    let tau: Vec<f64> = system.tau_hat.iter().copied().collect();
    let scale = nalgebra::DVector::from_iterator(system.se.len(), system.se.iter().map(|s| 1.0 / s));
    for _ in 0..100 {
        let r = nalgebra::DVector::from_vec(moments_oracle(system, reps, &theta, &tau)).component_mul(&scale);
        let mut jac = system.jacobian_theta(&theta);
        for (mut row, s) in jac.row_iter_mut().zip(scale.iter()) {
            row *= *s;
        }
        let step = jac.svd(true, true).solve(&(-r), 0.0).expect("svd");
        let size = step.amax();
        for (t, s) in theta.iter_mut().zip(step.iter()) {
            *t += s;
        }
        if size <= 1e-15 * theta.iter().fold(1.0f64, |m, t| m.max(t.abs())) {
            break;
        }
    }
    theta
}

fn rel_err(fd: &DMatrix<f64>, an: &DMatrix<f64>) -> f64 {
    let scale = an.amax().max(1e-12);
    (fd - an).amax() / scale
}

fn representers_for(cfg: &JacobianConfig, tilts: &[tilting::TiltFit], system: &MomentSystem) -> DMatrix<f64> {
    let reps = match cfg.b() {
        None => tilting::evaluate_representers(tilts, &system.base, &system.dataset),
        Some(b) => tilting::evaluate_relative_representers(tilts, &system.base, &system.dataset, &b),
    };
    reps.expect("representers").values
}

/// Worst blockwise relative error per Jacobian block for one configuration.
fn check_config(seed: u64) -> BTreeMap<&'static str, f64> {
    let nonlinear = seed.is_multiple_of(2);
    let relative = seed % 4 >= 2;
    let cfg = jacobian_config(seed, nonlinear, relative);
    let b = cfg.b();
    let system = build_system(
        cfg.model.clone(),
        cfg.dataset.clone(),
        cfg.base.clone(),
        &sequential(),
        b.as_ref().map(|f| f as &dyn Fn(&[f64]) -> f64),
    )
    .expect("system");
    let theta = cfg.theta.clone();
    let d = theta.len();
    let j_total = system.n_moments();
    let tau: Vec<f64> = system.tau_hat.iter().copied().collect();
    let w = system.inverse_se2_weight();
    let jac = compute_jacobians(&system, &theta, &w).expect("jacobians");
    let mut out = BTreeMap::new();

    // ∂M/∂θ
    let reps = &system.representers.values;
    let mut fd = DMatrix::zeros(j_total, d);
    for k in 0..d {
        let h = 1e-6 * theta[k].abs().max(1.0);
        let (mut tp, mut tm) = (theta.clone(), theta.clone());
        tp[k] += h;
        tm[k] -= h;
        let (mp, mm) = (moments_oracle(&system, reps, &tp, &tau), moments_oracle(&system, reps, &tm, &tau));
        for j in 0..j_total {
            fd[(j, k)] = (mp[j] - mm[j]) / (2.0 * h);
        }
    }
    out.insert("J^m_θ", rel_err(&fd, &jac.j_m_theta));

    // ∂M/∂η_s through the weights of trial s
    let mut worst_eta = 0.0f64;
    for (s, tilt) in system.tilts.iter().enumerate() {
        let p = tilt.eta.len();
        let mut fd = DMatrix::zeros(j_total, p);
        for r in 0..p {
            let h = 1e-6;
            let eval = |sign: f64| {
                let mut eta = tilt.eta.clone();
                eta[r] += sign * h;
                let weights: Vec<f64> = system
                    .base
                    .rows()
                    .map(|x| (eta[0] + tilt.specs.iter().zip(&eta[1..]).map(|(sp, e)| e * eval_spec(sp, x)).sum::<f64>()).exp())
                    .collect();
                let mut tilts = system.tilts.clone();
                tilts[s].weights = weights;
                moments_oracle(&system, &representers_for(&cfg, &tilts, &system), &theta, &tau)
            };
            let (mp, mm) = (eval(1.0), eval(-1.0));
            for j in 0..j_total {
                fd[(j, r)] = (mp[j] - mm[j]) / (2.0 * h);
            }
        }
        worst_eta = worst_eta.max(rel_err(&fd, &jac.j_m_eta[s]));
    }
    out.insert("J^m_η", worst_eta);

    // dη̂/dμ̂ = −J^η_μ for the moment coordinates; the leading coordinate
    // is pinned at 1, where J^η_μ μ⁺ = −e₀ holds instead.
    let tight = TiltConfig { tol: 1e-13, max_iter: 500, ..Default::default() };
    let mut worst_mu = 0.0f64;
    for (s, tilt) in system.tilts.iter().enumerate() {
        let p = tilt.eta.len();
        let an = -&jac.j_eta_mu[s];
        let mut fd = DMatrix::zeros(p, p - 1);
        for r in 1..p {
            let h = 1e-5 * tilt.mu_plus[r].abs().max(0.1);
            let solve = |sign: f64| {
                let mut mu = tilt.mu_plus.clone();
                mu[r] += sign * h;
                solve_tilt(&system.base, &tilt.specs, &mu, &tight).expect("perturbed tilt").eta
            };
            let (ep, em) = (solve(1.0), solve(-1.0));
            for a in 0..p {
                fd[(a, r - 1)] = (ep[a] - em[a]) / (2.0 * h);
            }
        }
        worst_mu = worst_mu.max(rel_err(&fd, &an.columns(1, p - 1).into_owned()));
        let mu = nalgebra::DVector::from_column_slice(&tilt.mu_plus);
        let mut e0 = nalgebra::DVector::zeros(p);
        e0[0] = -1.0;
        worst_mu = worst_mu.max((&jac.j_eta_mu[s] * mu - e0).amax());
    }
    out.insert("J^η_μ", worst_mu);

    // ∂M/∂τ
    let mut fd = DMatrix::zeros(j_total, j_total);
    let mut an = DMatrix::zeros(j_total, j_total);
    for s in 0..system.tilts.len() {
        let (off, size) = jac.j_m_tau_blocks[s];
        an.columns_mut(off, size).copy_from(&jac.j_m_tau(s, j_total));
    }
    for k in 0..j_total {
        let h = 1e-4;
        let mut sys = system.clone();
        sys.tau_hat[k] += h;
        let mp = sys.moments(&theta);
        sys.tau_hat[k] -= 2.0 * h;
        let mm = sys.moments(&theta);
        fd.set_column(k, &((mp - mm) / (2.0 * h)));
    }
    out.insert("J^m_τ", rel_err(&fd, &an));

    // dθ̂/dτ̂ = −J^θ_m for the local argmin under a τ-free weight; nonlinear
    // systems are first made exactly fitting at θ so the identity has no
    // curvature term; refits warm-start from the centre and are polished.
    let mut anchored = system.clone();
    if nonlinear {
        let m = moments_oracle(&system, reps, &theta, &vec![0.0; j_total]);
        anchored.tau_hat = nalgebra::DVector::from_vec(m);
    }
    let local = |start: &[f64]| FitOptions {
        weighting: Weighting::InverseSe2,
        max_iter: 2000,
        n_starts: 0,
        start: Some(start.to_vec()),
        ..Default::default()
    };
    let center = gmm::fit(&anchored, &local(&theta)).expect("fit");
    let jac_hat = compute_jacobians(&anchored, &center.theta, &w).expect("jacobians");
    let mut fd = DMatrix::zeros(d, j_total);
    for k in 0..j_total {
        let h = 1e-7;
        let refit = |delta: f64| {
            let mut sys = anchored.clone();
            sys.tau_hat[k] += delta;
            let start = gmm::fit(&sys, &local(&center.theta)).expect("refit").theta;
            polish(&sys, reps, start)
        };
        let (tp, tm) = (refit(h), refit(-h));
        for a in 0..d {
            fd[(a, k)] = -(tp[a] - tm[a]) / (2.0 * h);
        }
    }
    out.insert("J^θ_m", rel_err(&fd, &jac_hat.j_theta_m));

    // ∂ψ/∂θ over the base rows used as a target
    let target = system.base.clone().with_role(SampleRole::Target);
    let mut fit = center.clone();
    let an: Vec<f64> = {
        let mut acc = vec![0.0; d];
        for x in target.rows() {
            for (a, g) in acc.iter_mut().zip(cate::gradient(&fit.model, &fit.theta, x).unwrap()) {
                *a += g / target.n_rows() as f64;
            }
        }
        acc
    };
    let mut fd = DMatrix::zeros(1, d);
    let base_theta = fit.theta.clone();
    for k in 0..d {
        let h = 1e-6 * base_theta[k].abs().max(1.0);
        fit.theta = base_theta.clone();
        fit.theta[k] += h;
        let p = transport_ate(&fit, &target, TransportOptions::default()).unwrap().psi_hat;
        fit.theta[k] -= 2.0 * h;
        let m = transport_ate(&fit, &target, TransportOptions::default()).unwrap().psi_hat;
        fd[(0, k)] = (p - m) / (2.0 * h);
    }
    out.insert("J^ψ_θ", rel_err(&fd, &DMatrix::from_row_slice(1, d, &an)));
    out
}

fn jacobian_correctness() -> Verdict {
    let results = par::map_range(20, Parallelism::Parallel, |k| {
        catch_unwind(|| check_config(k as u64 + 1)).map_err(|e| {
            let msg = e.downcast_ref::<String>().cloned().unwrap_or_default();
            format!("seed {}: {msg}", k + 1)
        })
    });
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let errors: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    for r in results.iter().filter_map(|r| r.as_ref().ok()) {
        for (k, v) in r {
            let e = worst.entry(k).or_insert(0.0);
            *e = e.max(*v);
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    let mut detail = format!("20 configurations, worst relative error per block (≤ 1e-5): {detail}");
    for e in &errors {
        detail.push_str(&format!("; {e}"));
    }
    verdict(errors.is_empty() && max <= 1e-5, detail)
}

// ---------------------------------------------------------------- 5

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn variance_calibration() -> Verdict {
    let design = CalibrationDesign::default();
    let reps = 500;
    let psi = design.psi();
    let out = par::map_range(reps, Parallelism::Parallel, |r| {
        let draw = design.draw(50_000 + r as u64);
        let system = build_system(xyz_basis(), draw.dataset, draw.base, &sequential(), None).expect("system");
        let fit = fit_with(&system, Weighting::InverseSe2);
        let t = transport_ate(&fit, &draw.target, TransportOptions::default()).expect("transport");
        let var_theta: Vec<f64> = (0..4).map(|k| fit.var_theta[k][k]).collect();
        (fit.theta, var_theta, t.psi_hat, t.se * t.se, t.ci95.0 <= psi && psi <= t.ci95.1)
    });
    let mut ratios = Vec::new();
    for k in 0..4 {
        let est: Vec<f64> = out.iter().map(|o| o.0[k]).collect();
        let mean_var = out.iter().map(|o| o.1[k]).sum::<f64>() / reps as f64;
        ratios.push((format!("θ{k}"), mean_var / sample_var(&est)));
    }
    let psis: Vec<f64> = out.iter().map(|o| o.2).collect();
    let mean_var_psi = out.iter().map(|o| o.3).sum::<f64>() / reps as f64;
    ratios.push(("ψ".into(), mean_var_psi / sample_var(&psis)));
    let covered = out.iter().filter(|o| o.4).count();
    let binom = Binomial::new(0.95, reps as u64).unwrap();
    let (lo, hi) = (binom.inverse_cdf(0.005) as f64 / reps as f64, binom.inverse_cdf(0.995) as f64 / reps as f64);
    let coverage = covered as f64 / reps as f64;
    let ratio_ok = ratios.iter().all(|(_, r)| (r - 1.0).abs() <= 0.15);
    let cov_ok = coverage >= lo && coverage <= hi;
    let rs = ratios.iter().map(|(n, r)| format!("{n} {r:.3}")).collect::<Vec<_>>().join(", ");
    verdict(
        ratio_ok && cov_ok,
        format!("{reps} reps; mean Var̂ / empirical variance (1 ± 0.15): {rs}; coverage of ψ {coverage:.3} in [{lo:.3}, {hi:.3}]"),
    )
}

// ---------------------------------------------------------------- 6, 7

fn metrics(set: &str, reps: usize) -> BTreeMap<(u32, Method), MetricsRow> {
    let cfg = StudyConfig { replications: Some(reps), ..Default::default() };
    run_study(&scenario_set(set).unwrap(), &cfg).expect("study").into_iter().map(|r| ((r.scenario, r.method), r)).collect()
}

/// Published 5-trial rows: (bias_meta, var_metareg).
const FIVE_TRIAL: [(f64, f64); 16] = [
    (-0.0506, 0.9126),
    (-0.0486, 1.7992),
    (0.0597, 0.9024),
    (0.0607, 1.1977),
    (-0.0587, 0.5147),
    (-0.0598, 0.4928),
    (0.0522, 0.6461),
    (0.0502, 1.1994),
    (-0.0244, 1.2614),
    (-0.0248, 1.1647),
    (0.0266, 0.7811),
    (0.028, 0.9053),
    (-0.0265, 1.0711),
    (-0.0252, 0.8038),
    (0.0261, 0.7302),
    (0.0249, 0.5564),
];

fn simulation_five_trial() -> Verdict {
    let m = metrics("5trial", 300);
    let ids: Vec<u32> = m.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut fails = Vec::new();
    let mut max_bias: f64 = 0.0;
    let mut cov_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut max_gap: f64 = 0.0;
    let mut max_meta_dev: f64 = 0.0;
    let mut min_ratio = f64::INFINITY;
    for (row, &(bias_meta, var_metareg)) in FIVE_TRIAL.iter().enumerate() {
        let id = *ids
            .iter()
            .min_by(|a, b| {
                let da = (m[&(**a, Method::Meta)].bias - bias_meta).abs();
                let db = (m[&(**b, Method::Meta)].bias - bias_meta).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        let cima = &m[&(id, Method::Cima)];
        let ipd = &m[&(id, Method::Ipd)];
        let meta = &m[&(id, Method::Meta)];
        let metareg = &m[&(id, Method::Metareg)];
        max_bias = max_bias.max(cima.bias.abs());
        cov_range = (cov_range.0.min(cima.coverage), cov_range.1.max(cima.coverage));
        max_gap = max_gap.max((cima.bias - ipd.bias).abs());
        let meta_dev = (meta.bias.abs() - bias_meta.abs()).abs();
        max_meta_dev = max_meta_dev.max(meta_dev);
        let ratio = metareg.variance / cima.variance;
        if var_metareg >= 0.4 {
            min_ratio = min_ratio.min(ratio);
        }
        let ok = cima.bias.abs() <= 0.01
            && (0.92..=0.99).contains(&cima.coverage)
            && (cima.bias - ipd.bias).abs() <= 0.01
            && meta_dev <= 0.015
            && (var_metareg < 0.4 || ratio >= 50.0);
        if !ok {
            fails.push(format!(
                "row {} → s{id}: bias_cima {:.4}, cov {:.3}, bias_meta {:.4} vs {bias_meta}, var ratio {ratio:.0}",
                row + 1,
                cima.bias,
                cima.coverage,
                meta.bias
            ));
        }
    }
    let mut detail = format!(
        "300 reps; max |bias_cima| {max_bias:.4}, coverage_cima [{:.3}, {:.3}], max |bias_cima − bias_ipd| {max_gap:.4}, max ||bias_meta| − published| {max_meta_dev:.4}, min var_metareg/var_cima {min_ratio:.0}",
        cov_range.0, cov_range.1
    );
    if !fails.is_empty() {
        detail.push_str(&format!("; failing rows: {}", fails.join("; ")));
    }
    verdict(fails.is_empty(), detail)
}

fn simulation_single_trial() -> Verdict {
    let m = metrics("1trial", 300);
    let mut fails = Vec::new();
    let mut max_bias: f64 = 0.0;
    let mut cov_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut max_ratio: f64 = 0.0;
    for ((id, method), cima) in &m {
        if *method != Method::Cima {
            continue;
        }
        let ipd = &m[&(*id, Method::Ipd)];
        let ratio = cima.mse / ipd.mse;
        max_bias = max_bias.max(cima.bias.abs());
        cov_range = (cov_range.0.min(cima.coverage), cov_range.1.max(cima.coverage));
        max_ratio = max_ratio.max(ratio);
        if cima.bias.abs() > 0.01 || !(0.92..=0.99).contains(&cima.coverage) || ratio > 2.0 || cima.failures > 0 {
            fails.push(format!("s{id}: bias {:.4}, coverage {:.3}, MSE ratio {ratio:.2}, failures {}", cima.bias, cima.coverage, cima.failures));
        }
    }
    let mut detail = format!(
        "300 reps; max |bias_cima| {max_bias:.4}, coverage_cima [{:.3}, {:.3}], max MSE_cima/MSE_ipd {max_ratio:.2}",
        cov_range.0, cov_range.1
    );
    if !fails.is_empty() {
        detail.push_str(&format!("; failing: {}", fails.join("; ")));
    }
    verdict(fails.is_empty(), detail)
}

// ---------------------------------------------------------------- 8, 10

fn cli(out: &Path, args: &[&str]) -> Result<String, String> {
    let mut argv: Vec<OsString> = vec!["aggcate".into(), "--out".into(), out.into()];
    argv.extend(args.iter().map(OsString::from));
    let parsed = aggcate_cli::parse_args(argv).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    aggcate_cli::run_to(&parsed, &mut buf).map_err(|e| e.to_string())?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn sglt2_fit_args(copula: &Path) -> Vec<String> {
    vec![
        "fit".into(),
        "--effects".into(),
        path_str(&data("sglt2_effects.csv")),
        "--moments".into(),
        path_str(&data("sglt2_moments.csv")),
        "--schema".into(),
        path_str(&data("sglt2_schema.toml")),
        "--copula".into(),
        path_str(copula),
        "--formula".into(),
        "~ 1 + lvef + prehhf + diabetes".into(),
    ]
}

fn as_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn read_results(path: &Path) -> BTreeMap<String, f64> {
    let mut rdr = csv::Reader::from_path(path).expect("results csv");
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse::<f64>().unwrap())
        })
        .collect()
}

fn application() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    if let Err(e) = cli(out, &as_refs(&sglt2_fit_args(&data("pulse_copula.toml")))) {
        return verdict(false, format!("fit failed: {e}"));
    }
    let mut cells = Vec::new();
    for lvef in ["lvef<=40", "lvef>40"] {
        for hhf in ["yes", "no"] {
            for dm in ["yes", "no"] {
                cells.push(format!("{lvef},prehhf={hhf},diabetes={dm}"));
            }
        }
    }
    let mut args = vec!["transport".to_string()];
    for c in &cells {
        args.push("--subgroups".into());
        args.push(c.clone());
    }
    if let Err(e) = cli(out, &as_refs(&args)) {
        return verdict(false, format!("transport failed: {e}"));
    }
    let r = read_results(&out.join("transport.csv"));
    let overall = r["overall"];
    let mut bad = Vec::new();
    for hhf in ["yes", "no"] {
        for dm in ["yes", "no"] {
            let low = r[&format!("lvef<=40,prehhf={hhf},diabetes={dm}")];
            let high = r[&format!("lvef>40,prehhf={hhf},diabetes={dm}")];
            if low.abs() <= high.abs() {
                bad.push(format!("LVEF order fails at prehhf={hhf}, diabetes={dm}"));
            }
        }
    }
    for lvef in ["lvef<=40", "lvef>40"] {
        for hhf in ["yes", "no"] {
            let yes = r[&format!("{lvef},prehhf={hhf},diabetes=yes")];
            let no = r[&format!("{lvef},prehhf={hhf},diabetes=no")];
            if yes.abs() <= no.abs() {
                bad.push(format!("diabetes order fails at {lvef}, prehhf={hhf}"));
            }
        }
    }
    let in_band = (-0.055..=-0.020).contains(&overall);
    let cell_text = cells.iter().map(|c| format!("{:.4}", r[c])).collect::<Vec<_>>().join(" ");
    let mut detail = format!("overall ψ̂ = {overall:.4} (band [−0.055, −0.020]); cells {cell_text}");
    if !bad.is_empty() {
        detail.push_str(&format!("; {}", bad.join("; ")));
    }
    verdict(in_band && bad.is_empty(), detail)
}

/// Effects and moments restricted to `trials`, written under `dir`.
fn subset_inputs(dir: &Path, tag: &str, trials: &[&str]) -> (PathBuf, PathBuf) {
    let mut paths = Vec::new();
    for name in ["sglt2_effects.csv", "sglt2_moments.csv"] {
        let text = std::fs::read_to_string(data(name)).unwrap();
        let mut lines = text.lines();
        let mut kept = vec![lines.next().unwrap().to_string()];
        kept.extend(lines.filter(|l| trials.iter().any(|t| l.split(',').next() == Some(*t))).map(String::from));
        let p = dir.join(format!("{tag}_{name}"));
        std::fs::write(&p, kept.join("\n") + "\n").unwrap();
        paths.push(p);
    }
    (paths[0].clone(), paths[1].clone())
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let copula = root.join("copula.toml");
    std::fs::write(
        &copula,
        "n = 5000\nseed = 11\n\n[[marginal]]\nname = \"lvef\"\nkind = \"normal\"\nmean = 45.4\nsd = 10.0\n\n[[marginal]]\nname = \"prehhf\"\nkind = \"bernoulli\"\np = 0.091\n\n[[marginal]]\nname = \"diabetes\"\nkind = \"bernoulli\"\np = 0.265\n",
    )
    .unwrap();
    let (e1, m1) = subset_inputs(root, "a", &["EMPEROR-Preserved", "DELIVER"]);
    let (e2, m2) = subset_inputs(root, "b", &["DAPA-HF", "EMPEROR-Reduced"]);
    let schema = path_str(&data("sglt2_schema.toml"));
    let (out_a, out_b, out_main) = (root.join("fit_a"), root.join("fit_b"), root.join("main"));
    let fit_subset = |e: &Path, m: &Path| -> Vec<String> {
        let mut v = sglt2_fit_args(&copula);
        v[2] = path_str(e);
        v[4] = path_str(m);
        v
    };
    let steps: Vec<(&Path, Vec<String>)> = vec![
        (&out_main, vec!["synth".into(), "--spec".into(), path_str(&copula), "--n".into(), "3000".into()]),
        (&out_main, sglt2_fit_args(&copula)),
        (&out_main, vec!["transport".into(), "--subgroups".into(), "lvef<=40,prehhf=yes".into()]),
        (&out_main, vec!["validate".into(), "--effects".into(), path_str(&data("sglt2_effects.csv")), "--moments".into(), path_str(&data("sglt2_moments.csv")), "--schema".into(), schema.clone(), "--copula".into(), path_str(&copula)]),
        (&out_main, vec!["simulate".into(), "--scenario-set".into(), "1trial".into(), "--scenarios".into(), "1,9".into(), "--reps".into(), "6".into()]),
        (&out_a, fit_subset(&e1, &m1)),
        (&out_b, fit_subset(&e2, &m2)),
        (
            &out_main,
            vec![
                "indirect".into(),
                "--fit1".into(),
                path_str(&out_a.join("fit.json")),
                "--fit2".into(),
                path_str(&out_b.join("fit.json")),
                "--copula".into(),
                path_str(&copula),
            ],
        ),
    ];
    let run_all = || -> Result<(), String> {
        for (out, args) in &steps {
            cli(out, &as_refs(args)).map_err(|e| format!("{}: {e}", args[0]))?;
        }
        Ok(())
    };
    if let Err(e) = run_all() {
        return verdict(false, e);
    }
    let first = snapshot(root);
    if let Err(e) = run_all() {
        return verdict(false, e);
    }
    let second = snapshot(root);
    let differing: Vec<String> = first
        .iter()
        .filter(|(p, bytes)| second.get(*p) != Some(bytes))
        .map(|(p, _)| p.strip_prefix(root).unwrap().display().to_string())
        .collect();
    let produced = first.keys().filter(|p| p.extension().is_some_and(|e| e != "csv" || !p.starts_with(root.join("a_")))).count();

    // sequential and threaded simulation give the same metrics
    let seq = root.join("seq");
    let threaded = root.join("threaded");
    let sim = |jobs: &str| -> Vec<String> {
        vec!["simulate".into(), "--scenario-set".into(), "5trial".into(), "--scenarios".into(), "3".into(), "--reps".into(), "6".into(), "--jobs".into(), jobs.into()]
    };
    let same_jobs = cli(&seq, &as_refs(&sim("1"))).and_then(|_| cli(&threaded, &as_refs(&sim("4")))).map(|_| {
        std::fs::read(seq.join("metrics.csv")).unwrap() == std::fs::read(threaded.join("metrics.csv")).unwrap()
    });
    let jobs_ok = same_jobs.as_ref().is_ok_and(|b| *b);
    let mut detail = format!(
        "fit, transport, indirect, synth, simulate and validate rerun: {} of {produced} files byte-identical; metrics.csv with 1 vs 4 workers {}",
        produced - differing.len(),
        if jobs_ok { "identical" } else { "differs" }
    );
    if !differing.is_empty() {
        detail.push_str(&format!("; differing: {}", differing.join(", ")));
    }
    verdict(differing.is_empty() && jobs_ok, detail)
}

// ---------------------------------------------------------------- 9

fn indirect() -> Verdict {
    let theta1 = [-0.03, 0.02, -0.01, 0.015];
    let theta2 = [-0.05, -0.01, 0.02, -0.005];
    let all = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)];
    let fit_arm = |theta: &[f64], ids: [&str; 2], etas: [[f64; 3]; 2]| {
        let trials = [enum_trial(ids[0], etas[0], &all), enum_trial(ids[1], etas[1], &all)];
        let (ds, base) = enum_dataset(&trials, theta);
        let system = build_system(xyz_basis(), ds, base, &sequential(), None).expect("system");
        fit_with(&system, Weighting::InverseSe2)
    };
    let fit1 = fit_arm(&theta1, ["A1", "B1"], [ETAS[0], ETAS[1]]);
    let fit2 = fit_arm(&theta2, ["A2", "B2"], [ETAS[2], ETAS[3]]);
    let (law, _) = enumeration_support();
    let target_law = law.tilt(|x| x.to_vec(), &[0.3, -0.2, 0.4]);
    let contrast = |x: &[f64]| linear_cate(&theta2)(x) - linear_cate(&theta1)(x);
    let psi = target_law.expect(contrast);
    let n0 = 5000;
    let mc_se = (target_law.variance(contrast) / n0 as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let target = CovariateSample::new(&xyz_schema(), target_law.sample(n0, &mut rng), SampleRole::Target).unwrap();
    let r = indirect_comparison(&fit1, &fit2, &target, TransportOptions::default()).expect("indirect");
    let z = (r.psi_hat - psi).abs() / mc_se;
    let own = indirect_comparison(&fit1, &fit1, &target, TransportOptions::default()).expect("self");
    let self_zero = own.psi_hat == 0.0 && own.se == 0.0;
    verdict(
        z <= 3.0 && self_zero,
        format!(
            "ψ̂¹² = {:.6} vs population {psi:.6}, error {:.2} MC SEs (≤ 3, MC SE {mc_se:.2e}); self-comparison ψ̂ = {}, se = {}",
            r.psi_hat, z, own.psi_hat, own.se
        ),
    )
}
