//! Command-line front end of `aggcate`: argument definitions, config-file
//! expansion and the subcommand implementations.

mod commands;
mod config;
mod manifest;
mod report;

pub use config::expand_args;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
    #[error("writing output: {0}")]
    Output(String),
    #[error(transparent)]
    Lib(#[from] aggcate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Lib(e) if e.is_input_error() => 2,
            CliError::Numeric(_) | CliError::Output(_) | CliError::Lib(_) => 1,
        }
    }
}

impl From<aggcate::aggdata::DataError> for CliError {
    fn from(e: aggcate::aggdata::DataError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<aggcate::estimands::EstimandError> for CliError {
    fn from(e: aggcate::estimands::EstimandError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<aggcate::synthpop::SynthError> for CliError {
    fn from(e: aggcate::synthpop::SynthError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<aggcate::simulate::SimError> for CliError {
    fn from(e: aggcate::simulate::SimError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<aggcate::gmm::GmmError> for CliError {
    fn from(e: aggcate::gmm::GmmError) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<aggcate::cate::CateError> for CliError {
    fn from(e: aggcate::cate::CateError) -> Self {
        CliError::Lib(e.into())
    }
}

const AFTER_HELP: &str = "\
Every flag can also be set through an environment variable named AGGCATE_<FLAG>
(upper case, dashes as underscores, e.g. AGGCATE_OUT, AGGCATE_SCENARIO_SET), or
through a --config TOML file: top-level keys set global flags, a [<subcommand>]
table sets that subcommand's flags. Command-line flags take precedence over
environment variables, which take precedence over the config file.

Exit codes: 0 success, 1 numerical failure, 2 input error.";

#[derive(Debug, Parser)]
#[command(name = "aggcate", version, about = "Transport trial treatment effects to a target population from aggregate data", after_help = AFTER_HELP)]
pub struct Cli {
    /// Master seed: overrides copula-spec seeds and seeds GMM multistart and simulations
    #[arg(long, global = true, env = "AGGCATE_SEED")]
    pub seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(long, global = true, env = "AGGCATE_OUT", default_value = "out")]
    pub out: PathBuf,
    /// TOML file with default flag values (see below)
    #[arg(long, global = true, env = "AGGCATE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Log level: error, warn, info, debug or trace
    #[arg(long, global = true, env = "AGGCATE_LOG_LEVEL", default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the CATE model by GMM and write fit.json, fit.txt and a manifest
    Fit(FitArgs),
    /// Marginalize a fitted CATE over the target sample, overall and per subgroup
    Transport(TransportArgs),
    /// Indirect comparison of two fits from disjoint trial sets
    Indirect(IndirectArgs),
    /// Generate a synthetic covariate sample from a Gaussian-copula spec
    Synth(SynthArgs),
    /// Run the simulation study and write metrics.csv
    Simulate(SimulateArgs),
    /// Check inputs and report per-trial dimensions and tilt feasibility
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseChoice {
    /// The target sample (from --target or --copula)
    Target,
    /// A covariate CSV given by --base-file
    File,
    /// A copula sample drawn from the spec given by --base-copula
    Copula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingArg {
    Identity,
    InverseSe2,
    TwoStep,
}

impl From<WeightingArg> for aggcate::gmm::Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Identity => aggcate::gmm::Weighting::Identity,
            WeightingArg::InverseSe2 => aggcate::gmm::Weighting::InverseSe2,
            WeightingArg::TwoStep => aggcate::gmm::Weighting::TwoStep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationArg {
    /// Within-trial effect correlations approximated from tilted probabilities
    Approximate,
    /// Within-trial effect correlations set to 0
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CateScaleArg {
    /// Effects are differences of the CATE itself
    Additive,
    /// The CATE multiplies the target control-outcome risk
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountScaleArg {
    /// Risk differences from event counts
    Difference,
    /// Log risk ratios from event counts
    Ratio,
}

/// Aggregate trial inputs.
#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct DataArgs {
    /// Effects CSV: trial,covariate,level,estimate,se[,events1,n1,events0,n0]
    #[arg(long, env = "AGGCATE_EFFECTS")]
    pub effects: Option<PathBuf>,
    /// Moments CSV: trial,covariate,statistic,value,n
    #[arg(long, env = "AGGCATE_MOMENTS")]
    pub moments: Option<PathBuf>,
    /// Covariate schema TOML (covariates and trial subgroup strata)
    #[arg(long, env = "AGGCATE_SCHEMA")]
    pub schema: Option<PathBuf>,
    /// Scale of effects derived from event counts
    #[arg(long, value_enum, env = "AGGCATE_COUNT_SCALE", default_value = "difference")]
    pub count_scale: CountScaleArg,
}

/// Target covariate sample.
#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct TargetArgs {
    /// Target covariate CSV (one column per covariate, optional Y)
    #[arg(long, env = "AGGCATE_TARGET", conflicts_with = "copula")]
    pub target: Option<PathBuf>,
    /// Copula spec TOML from which the target sample is generated
    #[arg(long, env = "AGGCATE_COPULA")]
    pub copula: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub target: TargetArgs,
    /// CATE basis formula, e.g. "~ 1 + lvef + prehhf + diabetes" [default: intercept plus every covariate]
    #[arg(long, env = "AGGCATE_FORMULA")]
    pub formula: Option<String>,
    /// Scale of the CATE model
    #[arg(long, value_enum, env = "AGGCATE_CATE_SCALE", default_value = "additive")]
    pub cate_scale: CateScaleArg,
    /// Base distribution Q used for tilting
    #[arg(long, value_enum, env = "AGGCATE_BASE", default_value = "target")]
    pub base: BaseChoice,
    /// Base covariate CSV (with --base file)
    #[arg(long, env = "AGGCATE_BASE_FILE")]
    pub base_file: Option<PathBuf>,
    /// Base copula spec TOML (with --base copula)
    #[arg(long, env = "AGGCATE_BASE_COPULA")]
    pub base_copula: Option<PathBuf>,
    /// GMM weighting matrix
    #[arg(long, value_enum, env = "AGGCATE_WEIGHTING", default_value = "inverse-se2")]
    pub weighting: WeightingArg,
    /// Within-trial effect correlation model
    #[arg(long, value_enum, env = "AGGCATE_CORRELATION", default_value = "approximate")]
    pub correlation: CorrelationArg,
    /// Drop the base-sample variance term (Q known exactly)
    #[arg(long, env = "AGGCATE_TREAT_Q_EXACT")]
    pub treat_q_exact: bool,
    /// Tilt convergence tolerance on the standardized moment residual
    #[arg(long, env = "AGGCATE_TILT_TOL", default_value_t = 1e-11)]
    pub tilt_tol: f64,
    /// Maximum Newton iterations per tilt
    #[arg(long, env = "AGGCATE_TILT_MAX_ITER", default_value_t = 200)]
    pub tilt_max_iter: usize,
    /// Maximum Gauss-Newton iterations for nonlinear models
    #[arg(long, env = "AGGCATE_MAX_ITER", default_value_t = 500)]
    pub max_iter: usize,
    /// Use the iterative solver even for linear bases
    #[arg(long, env = "AGGCATE_FORCE_ITERATIVE")]
    pub force_iterative: bool,
    /// Validate inputs and print the moment-system dimensions without fitting
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct TransportArgs {
    /// Fit report written by `aggcate fit` [default: <out>/fit.json]
    #[arg(long, env = "AGGCATE_FIT")]
    pub fit: Option<PathBuf>,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Subgroup filter, a comma-separated conjunction such as "lvef<=40,prehhf=yes"; repeatable
    #[arg(long = "subgroups", env = "AGGCATE_SUBGROUPS", value_delimiter = ';')]
    pub subgroups: Vec<String>,
    /// Follow-up-time stratum of the target (time-stratified models)
    #[arg(long, env = "AGGCATE_STRATUM", default_value_t = 0)]
    pub stratum: usize,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct IndirectArgs {
    /// Fit report of the first trial set
    #[arg(long, env = "AGGCATE_FIT1")]
    pub fit1: Option<PathBuf>,
    /// Fit report of the second trial set
    #[arg(long, env = "AGGCATE_FIT2")]
    pub fit2: Option<PathBuf>,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Follow-up-time stratum of the target (time-stratified models)
    #[arg(long, env = "AGGCATE_STRATUM", default_value_t = 0)]
    pub stratum: usize,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct SynthArgs {
    /// Copula spec TOML
    #[arg(long, env = "AGGCATE_SPEC", conflicts_with = "from_trial")]
    pub spec: Option<PathBuf>,
    /// Build the spec from this trial's reported moments (needs --moments, --effects and --schema)
    #[arg(long, env = "AGGCATE_FROM_TRIAL")]
    pub from_trial: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Exchangeable latent correlation (with --from-trial)
    #[arg(long, env = "AGGCATE_RHO", default_value_t = 0.0)]
    pub rho: f64,
    /// Number of rows [default: the spec's n, or 100000 with --from-trial]
    #[arg(long, env = "AGGCATE_N")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct SimulateArgs {
    /// Scenario set: 5trial, 1trial or all
    #[arg(long, env = "AGGCATE_SCENARIO_SET", default_value = "5trial")]
    pub scenario_set: String,
    /// Scenario catalog TOML [default: the built-in catalog]
    #[arg(long, env = "AGGCATE_CATALOG")]
    pub catalog: Option<PathBuf>,
    /// Restrict to these scenario ids (comma-separated)
    #[arg(long, env = "AGGCATE_SCENARIOS", value_delimiter = ',')]
    pub scenarios: Vec<u32>,
    /// Replications per scenario [default: each scenario's own count]
    #[arg(long, env = "AGGCATE_REPS")]
    pub reps: Option<usize>,
    /// Worker threads (1 = sequential) [default: all cores]
    #[arg(long, env = "AGGCATE_JOBS")]
    pub jobs: Option<usize>,
    /// Methods to run (comma-separated: cima, meta, metareg, ipd) [default: all applicable]
    #[arg(long, env = "AGGCATE_METHODS", value_delimiter = ',')]
    pub methods: Vec<String>,
    /// GMM weighting of the CIMA fits
    #[arg(long, value_enum, env = "AGGCATE_WEIGHTING", default_value = "inverse-se2")]
    pub weighting: WeightingArg,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Tilt convergence tolerance on the standardized moment residual
    #[arg(long, env = "AGGCATE_TILT_TOL", default_value_t = 1e-11)]
    pub tilt_tol: f64,
}

/// Expand config-file defaults and parse, reporting usage errors as input errors.
pub fn parse_args(args: Vec<OsString>) -> Result<Cli, CliError> {
    let args = config::expand_args(args)?;
    Cli::try_parse_from(args).map_err(|e| CliError::Input(e.to_string()))
}

/// Run a parsed command, printing tables to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    run_to(cli, &mut stdout.lock())
}

/// Run a parsed command, writing tables to `out`.
pub fn run_to(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    commands::run(cli, out)
}
