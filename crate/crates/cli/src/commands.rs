use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aggcate::aggdata::{
    load_covariate_sample, load_meta_dataset, write_covariate_sample, CovariateKind, CovariateSample, CovariateSchema,
    EffectScale, MetaDataset, SampleRole,
};
use aggcate::cate::{CateBasis, CateModel, CateSpec, Scale};
use aggcate::estimands::{
    fit_control_outcome, indirect_comparison, subgroup_ate, transport_ate, transport_relative, write_results_csv, Filter,
    TransportOptions, TransportResult,
};
use aggcate::gmm::{self, CateFit, FitOptions, SystemOptions};
use aggcate::inference::{CorrelationMode, CovarianceConfig};
use aggcate::linalg::expit;
use aggcate::par::Parallelism;
use aggcate::simulate::{self, Method, StudyConfig};
use aggcate::synthpop::{self, CopulaSpec, CorrelationInput};
use aggcate::tilting::{self, TiltConfig};
use serde_json::json;

use crate::manifest::{check_fit_fresh, Manifest};
use crate::{
    report, BaseChoice, CateScaleArg, Cli, CliError, Command, CorrelationArg, CountScaleArg, DataArgs, FitArgs,
    IndirectArgs, SimulateArgs, SynthArgs, TargetArgs, TransportArgs, ValidateArgs,
};

const DEFAULT_SEED: u64 = 42;
const DEFAULT_SYNTH_N: usize = 100_000;

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => fit(cli, a, out),
        Command::Transport(a) => transport(cli, a, out),
        Command::Indirect(a) => indirect(cli, a, out),
        Command::Synth(a) => synth(cli, a, out),
        Command::Simulate(a) => simulate(cli, a, out),
        Command::Validate(a) => validate(cli, a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Output(format!("stdout: {e}")))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Input(format!("missing required flag --{flag}")))
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn manifest_config<T: serde::Serialize>(cli: &Cli, args: &T) -> serde_json::Value {
    json!({ "seed": cli.seed, "args": args })
}

fn load_dataset(d: &DataArgs, m: &mut Manifest) -> Result<MetaDataset, CliError> {
    let effects = require(&d.effects, "effects")?;
    let moments = require(&d.moments, "moments")?;
    let schema = require(&d.schema, "schema")?;
    let scale = match d.count_scale {
        CountScaleArg::Difference => EffectScale::Difference,
        CountScaleArg::Ratio => EffectScale::Ratio,
    };
    let ds = load_meta_dataset(effects, moments, schema, scale)?;
    for p in [effects, moments, schema] {
        m.add_input(p)?;
    }
    Ok(ds)
}

fn load_copula(path: &Path, seed: Option<u64>, m: &mut Manifest) -> Result<CopulaSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("copula spec {}: {e}", path.display())))?;
    let mut spec = CopulaSpec::from_toml_str(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    m.add_input(path)?;
    Ok(spec)
}

/// Draw from `spec` and reorder columns (and categorical codes) to `schema`.
fn copula_sample(spec: &CopulaSpec, schema: &CovariateSchema, role: SampleRole) -> Result<CovariateSample, CliError> {
    let spec_schema = spec.schema()?;
    let raw = synthpop::sample(spec, role, Parallelism::Sequential)?;
    let mut columns = Vec::with_capacity(schema.len());
    for c in schema.covariates() {
        let j = spec_schema
            .index_of(&c.name)
            .map_err(|_| CliError::Input(format!("copula spec has no marginal for covariate `{}`", c.name)))?;
        let recode: Option<Vec<f64>> = match (&c.kind, spec_schema.covariate(j).levels()) {
            (CovariateKind::Categorical { .. }, Some(levels)) => Some(
                levels
                    .iter()
                    .map(|l| {
                        c.level_code(l).map(|v| v as f64).ok_or_else(|| {
                            CliError::Input(format!("copula level `{l}` of `{}` is not in the schema", c.name))
                        })
                    })
                    .collect::<Result<_, _>>()?,
            ),
            _ => None,
        };
        columns.push((j, recode));
    }
    let mut data = Vec::with_capacity(raw.n_rows() * schema.len());
    for row in raw.rows() {
        for (j, recode) in &columns {
            data.push(match recode {
                Some(map) => map[row[*j] as usize],
                None => row[*j],
            });
        }
    }
    Ok(CovariateSample::new(schema, data, role)?)
}

fn recorded_path(manifest: Option<&Manifest>, key: &str) -> Option<PathBuf> {
    manifest?.config.get("args")?.get("target")?.get(key)?.as_str().map(PathBuf::from)
}

fn recorded_seed(manifest: Option<&Manifest>) -> Option<u64> {
    manifest?.config.get("seed")?.as_u64()
}

/// Target sample from `--target`, `--copula`, or else the one recorded in
/// the fit manifest.
fn resolve_target(
    t: &TargetArgs,
    schema: &CovariateSchema,
    seed: Option<u64>,
    fallback: Option<&Manifest>,
    m: &mut Manifest,
) -> Result<CovariateSample, CliError> {
    let (target, copula, seed) = match (&t.target, &t.copula) {
        (None, None) => (
            recorded_path(fallback, "target"),
            recorded_path(fallback, "copula"),
            seed.or(recorded_seed(fallback)),
        ),
        _ => (t.target.clone(), t.copula.clone(), seed),
    };
    if let Some(p) = target {
        let s = load_covariate_sample(&p, schema, SampleRole::Target)?;
        m.add_input(&p)?;
        return Ok(s);
    }
    if let Some(p) = copula {
        let spec = load_copula(&p, seed, m)?;
        return copula_sample(&spec, schema, SampleRole::Target);
    }
    Err(CliError::Input("no target sample: pass --target or --copula".into()))
}

fn basis(a: &FitArgs, schema: &CovariateSchema) -> Result<CateSpec, CliError> {
    let b = match &a.formula {
        Some(f) => CateBasis::parse(f, schema)?,
        None => CateBasis::default_for(schema),
    };
    let scale = match a.cate_scale {
        CateScaleArg::Additive => Scale::Additive,
        CateScaleArg::Relative => Scale::Relative,
    };
    Ok(b.with_scale(scale).into())
}

fn fit(cli: &Cli, a: &FitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = Manifest::new("fit", manifest_config(cli, a));
    let ds = load_dataset(&a.data, &mut m)?;
    let model = basis(a, &ds.schema)?;
    if a.dry_run {
        emit(out, &report::dimensions(&ds, &model))?;
        return Ok(());
    }
    let relative = a.cate_scale == CateScaleArg::Relative;
    let target = if a.base == BaseChoice::Target || relative {
        Some(resolve_target(&a.target, &ds.schema, cli.seed, None, &mut m)?)
    } else {
        None
    };
    let base = match a.base {
        BaseChoice::Target => target.clone().expect("resolved above").with_role(SampleRole::Base),
        BaseChoice::File => {
            let p = require(&a.base_file, "base-file")?;
            let s = load_covariate_sample(p, &ds.schema, SampleRole::Base)?;
            m.add_input(p)?;
            s
        }
        BaseChoice::Copula => {
            let spec = load_copula(require(&a.base_copula, "base-copula")?, cli.seed, &mut m)?;
            copula_sample(&spec, &ds.schema, SampleRole::Base)?
        }
    };
    let opts = SystemOptions {
        tilt: TiltConfig { tol: a.tilt_tol, max_iter: a.tilt_max_iter, ..Default::default() },
        covariance: CovarianceConfig {
            correlation: match a.correlation {
                CorrelationArg::Approximate => CorrelationMode::Approximate,
                CorrelationArg::Independent => CorrelationMode::Independent,
            },
            treat_q_exact: a.treat_q_exact,
            ..Default::default()
        },
        parallelism: Parallelism::Sequential,
    };
    let system = if relative {
        let t = target.as_ref().expect("resolved above");
        let beta = fit_control_outcome(t)?;
        let b = move |x: &[f64]| expit(beta[0] + x.iter().zip(beta.iter().skip(1)).map(|(u, c)| u * c).sum::<f64>());
        gmm::build_system(model, ds, base, &opts, Some(&b))?
    } else {
        gmm::build_system(model, ds, base, &opts, None)?
    };
    let fit_opts = FitOptions {
        weighting: a.weighting.into(),
        force_iterative: a.force_iterative,
        max_iter: a.max_iter,
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        ..Default::default()
    };
    let fit = gmm::fit(&system, &fit_opts)?;
    ensure_out(&cli.out)?;
    let json_path = cli.out.join("fit.json");
    let text_path = cli.out.join("fit.txt");
    write_json(&json_path, &fit)?;
    let text = report::fit_text(&fit);
    write_text(&text_path, &text)?;
    m.add_output(&json_path)?;
    m.add_output(&text_path)?;
    m.write(&cli.out)?;
    emit(out, &text)?;
    Ok(())
}

fn read_fit(path: &Path, m: &mut Manifest) -> Result<(CateFit, Manifest), CliError> {
    let manifest = check_fit_fresh(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("fit report {}: {e}", path.display())))?;
    let fit: CateFit =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("fit report {}: {e}", path.display())))?;
    m.add_input(path)?;
    Ok((fit, manifest))
}

fn write_results(cli: &Cli, name: &str, results: &[TransportResult], m: &mut Manifest, out: &mut dyn Write) -> Result<(), CliError> {
    ensure_out(&cli.out)?;
    let csv_path = cli.out.join(format!("{name}.csv"));
    let json_path = cli.out.join(format!("{name}.json"));
    write_results_csv(results, create(&csv_path)?).map_err(|e| CliError::Output(format!("{}: {e}", csv_path.display())))?;
    write_json(&json_path, &results)?;
    m.add_output(&csv_path)?;
    m.add_output(&json_path)?;
    m.write(&cli.out)?;
    emit(out, &report::results_table(results))?;
    Ok(())
}

fn transport(cli: &Cli, a: &TransportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = Manifest::new("transport", manifest_config(cli, a));
    let fit_path = a.fit.clone().unwrap_or_else(|| cli.out.join("fit.json"));
    let (fit, fit_manifest) = read_fit(&fit_path, &mut m)?;
    let target = resolve_target(&a.target, &fit.schema, cli.seed, Some(&fit_manifest), &mut m)?;
    let opts = TransportOptions { stratum: a.stratum };
    let mut results = Vec::with_capacity(a.subgroups.len() + 1);
    if fit.model.scale() == Scale::Relative {
        if !a.subgroups.is_empty() {
            return Err(CliError::Input("subgroup estimates are available for additive-scale fits only".into()));
        }
        results.push(transport_relative(&fit, &target, None, opts)?);
    } else {
        results.push(transport_ate(&fit, &target, opts)?);
        for s in &a.subgroups {
            let filter = Filter::parse(s, &fit.schema)?;
            results.push(subgroup_ate(&fit, &target, &filter, opts)?);
        }
    }
    write_results(cli, "transport", &results, &mut m, out)
}

fn indirect(cli: &Cli, a: &IndirectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = Manifest::new("indirect", manifest_config(cli, a));
    let (fit1, man1) = read_fit(require(&a.fit1, "fit1")?, &mut m)?;
    let (fit2, _) = read_fit(require(&a.fit2, "fit2")?, &mut m)?;
    let target = resolve_target(&a.target, &fit1.schema, cli.seed, Some(&man1), &mut m)?;
    let r = indirect_comparison(&fit1, &fit2, &target, TransportOptions { stratum: a.stratum })?;
    write_results(cli, "indirect", &[r], &mut m, out)
}

fn synth(cli: &Cli, a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = Manifest::new("synth", manifest_config(cli, a));
    let mut spec = match (&a.spec, &a.from_trial) {
        (Some(p), _) => load_copula(p, cli.seed, &mut m)?,
        (None, Some(trial)) => {
            let ds = load_dataset(&a.data, &mut m)?;
            let summaries = synthpop::summaries_from_trial(&ds, trial)?;
            let n = a.n.unwrap_or(DEFAULT_SYNTH_N);
            synthpop::fit_spec_from_summaries(
                &summaries,
                CorrelationInput::Exchangeable(a.rho),
                n,
                cli.seed.unwrap_or(DEFAULT_SEED),
            )?
        }
        (None, None) => return Err(CliError::Input("pass --spec or --from-trial".into())),
    };
    if let Some(n) = a.n {
        spec.n = n;
    }
    spec.validate()?;
    let schema = spec.schema()?;
    let sample = synthpop::sample(&spec, SampleRole::Target, Parallelism::Sequential)?;
    ensure_out(&cli.out)?;
    let csv_path = cli.out.join("synth.csv");
    let spec_path = cli.out.join("synth.spec.toml");
    write_covariate_sample(&sample, &schema, create(&csv_path)?)?;
    write_text(&spec_path, &spec.to_toml_string())?;
    m.add_output(&csv_path)?;
    m.add_output(&spec_path)?;
    m.write(&cli.out)?;
    emit(out, &format!("wrote {} rows of {} covariates to {}\n", sample.n_rows(), sample.n_cols(), csv_path.display()))?;
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = Manifest::new("simulate", manifest_config(cli, a));
    let mut scenarios = match &a.catalog {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("catalog {}: {e}", p.display())))?;
            m.add_input(p)?;
            let all = simulate::parse_catalog(&text)?;
            match a.scenario_set.as_str() {
                "all" => all,
                "5trial" | "1trial" => all.into_iter().filter(|s| s.set == a.scenario_set).collect(),
                other => return Err(simulate::SimError::UnknownScenarioSet(other.into()).into()),
            }
        }
        None => simulate::scenario_set(&a.scenario_set)?,
    };
    if !a.scenarios.is_empty() {
        scenarios.retain(|s| a.scenarios.contains(&s.id));
        if scenarios.is_empty() {
            return Err(CliError::Input(format!("no scenario with id in {:?}", a.scenarios)));
        }
    }
    let methods = if a.methods.is_empty() {
        None
    } else {
        Some(a.methods.iter().map(|s| s.parse::<Method>()).collect::<Result<Vec<_>, _>>().map_err(CliError::Input)?)
    };
    let cfg = StudyConfig {
        replications: a.reps,
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        methods,
        parallelism: Parallelism::from_jobs(a.jobs),
        cima_weighting: a.weighting.into(),
    };
    let rows = simulate::run_study(&scenarios, &cfg)?;
    ensure_out(&cli.out)?;
    let path = cli.out.join("metrics.csv");
    simulate::write_metrics_csv(&rows, create(&path)?).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    m.add_output(&path)?;
    m.write(&cli.out)?;
    emit(out, &report::metrics_table(&rows))?;
    Ok(())
}

#[derive(serde::Serialize)]
struct TiltCheck {
    trial: String,
    feasible: bool,
    residual_norm: Option<f64>,
    iterations: Option<usize>,
    message: Option<String>,
}

fn validate(cli: &Cli, a: &ValidateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = Manifest::new("validate", manifest_config(cli, a));
    let ds = load_dataset(&a.data, &mut m)?;
    let model: CateSpec = CateBasis::default_for(&ds.schema).into();
    emit(out, &report::dimensions(&ds, &model))?;
    let has_target = a.target.target.is_some() || a.target.copula.is_some();
    let mut checks = Vec::new();
    if has_target {
        let base = resolve_target(&a.target, &ds.schema, cli.seed, None, &mut m)?.with_role(SampleRole::Base);
        let cfg = TiltConfig { tol: a.tilt_tol, ..Default::default() };
        for t in &ds.trials {
            checks.push(match tilting::solve_trial_tilt(t, &base, &cfg) {
                Ok(f) => TiltCheck {
                    trial: t.id.clone(),
                    feasible: true,
                    residual_norm: Some(f.residual_norm),
                    iterations: Some(f.iterations),
                    message: None,
                },
                Err(e) => TiltCheck {
                    trial: t.id.clone(),
                    feasible: false,
                    residual_norm: None,
                    iterations: None,
                    message: Some(format!("tilting: {e}")),
                },
            });
        }
        for c in &checks {
            match &c.message {
                None => emit(
                    out,
                    &format!(
                        "tilt {:<24} feasible  residual {:.2e}  iterations {}\n",
                        c.trial,
                        c.residual_norm.unwrap_or(0.0),
                        c.iterations.unwrap_or(0)
                    ),
                )?,
                Some(msg) => emit(out, &format!("tilt {:<24} FAILED    {msg}\n", c.trial))?,
            }
        }
    }
    ensure_out(&cli.out)?;
    let path = cli.out.join("validate.json");
    let report = json!({
        "trials": ds.trials.iter().map(|t| json!({
            "trial": t.id,
            "n": t.n,
            "effects": t.effects.len(),
            "moments": t.moments.len(),
        })).collect::<Vec<_>>(),
        "total_effects": ds.total_effects(),
        "tilts": checks,
    });
    write_json(&path, &report)?;
    m.add_output(&path)?;
    m.write(&cli.out)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.feasible).map(|c| c.trial.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Input(format!("tilting failed for {}", failed.join(", "))));
    }
    Ok(())
}
