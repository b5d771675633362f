//! Command-line surface: `analytic` tables, `simulate` sweeps and `trace`
//! replays.
//!
//! Every run writes `manifest.toml` before any data file. Data rows carry
//! the manifest id, the sweep point and the seed, so a CSV can always be
//! traced back to the configuration that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analytics::{
    alpha_asymptotic_spaced, alpha_asymptotic_uniform, alpha_asymptotic_zipf_consecutive, expected_alpha_exact,
    view_failure_prob, ZipfPeriodicSubscription,
};
use crate::channel::PhyConfig;
use crate::error::Error;
use crate::model::{Link, Subscription, SynthesisConfig, TransmissionPlan, UserChannelState, UserId};
use crate::oracle::{
    enumerate_failure_prob, mc_alpha_spaced, mc_alpha_uniform, mc_alpha_zipf_consecutive, mc_expected_alpha,
    McEstimate, ENUMERATION_LIMIT,
};
use crate::protocol::{ClientState, Protocol, ProtocolParams};
use crate::sim::{run_scenario_streaming, Cell, FrameOutcome, ScenarioConfig, Scheme, Summary, WorkloadConfig};

pub const SEED_ENV: &str = "MVGMP_SIM_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Script { path: String, line: usize, message: String },

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error(transparent)]
    Model(Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvariantBreach(msg) => CliError::Invariant(msg),
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    /// 2 for bad input, 3 for a broken protocol invariant, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Script { .. } | CliError::Model(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io { .. } | CliError::Csv(_) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Parser, Debug)]
#[command(name = "mvgmp", version, about = "Multi-view video multicast: analytics, simulation and protocol traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Closed-form failure probabilities and obtained fractions over a grid.
    Analytic(AnalyticArgs),
    /// Run MVGMP and conventional multicast over a sweep.
    Simulate(SimulateArgs),
    /// Replay a scripted event file through the protocol and print the messages.
    Trace(TraceArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Formula {
    /// Failure probability of one desired view, all views sent on one link.
    Theorem1,
    /// Expected obtained fraction of all views for the same plan.
    Corollary1,
    /// Asymptotic obtained fraction, every view sent.
    Theorem2,
    /// Asymptotic obtained fraction, one view in every Rtilde sent.
    Corollary2,
    /// Asymptotic obtained fraction under a periodic Zipf subscription.
    Theorem3,
}

#[derive(Args, Debug)]
pub struct AnalyticArgs {
    pub formula: Formula,
    /// Per-broadcast loss probability (success probability for theorem3).
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub p: Vec<f64>,
    #[arg(long = "R", value_delimiter = ',', default_value = "2")]
    pub range: Vec<usize>,
    /// Spacing of transmitted views (corollary2).
    #[arg(long = "Rtilde", value_delimiter = ',', default_value = "1")]
    pub spacing: Vec<usize>,
    /// Zipf period (theorem3).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub m: Vec<usize>,
    /// Zipf exponent (theorem3).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub s: Vec<f64>,
    /// Zipf normalizer (theorem3).
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    /// Number of views (theorem1, corollary1).
    #[arg(long = "M", value_delimiter = ',', default_value = "8")]
    pub views: Vec<usize>,
    /// Copies of every view (theorem1, corollary1).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub n: Vec<u32>,
    /// Desired view (theorem1).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub desired: Vec<usize>,
    /// Add a column from the matching brute-force or Monte Carlo oracle.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 100_000)]
    pub samples: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds to run; overrides the config file and the environment.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<u64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    pub script: PathBuf,
    /// Directory for trace.txt; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ValueEnum for Scheme {
    fn value_variants<'a>() -> &'a [Self] {
        &[Scheme::Mvgmp, Scheme::Baseline, Scheme::Both]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Scheme::Mvgmp => "mvgmp",
            Scheme::Baseline => "baseline",
            Scheme::Both => "both",
        }))
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mvgmp: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analytic(args) => cmd_analytic(&args),
        Command::Simulate(args) => cmd_simulate(&args).map(|_| ()),
        Command::Trace(args) => cmd_trace(&args),
    }
}

// ---------------------------------------------------------------- analytic

pub const ANALYTIC_COLUMNS: [&str; 14] = [
    "formula", "p", "R", "Rtilde", "m", "s", "M", "n", "desired", "analytic", "oracle", "oracle_se", "samples",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticRow {
    pub p: f64,
    pub range: usize,
    pub spacing: Option<usize>,
    pub zipf: Option<(usize, f64)>,
    pub views: Option<usize>,
    pub copies: Option<u32>,
    pub desired: Option<usize>,
    pub analytic: f64,
    pub oracle: Option<McEstimate>,
}

/// Every row of the requested grid, in nested-loop order of the flags.
pub fn analytic_rows(args: &AnalyticArgs) -> Result<Vec<AnalyticRow>, CliError> {
    let mut rows = Vec::new();
    let base = |p: f64, range: usize| AnalyticRow {
        p,
        range,
        spacing: None,
        zipf: None,
        views: None,
        copies: None,
        desired: None,
        analytic: f64::NAN,
        oracle: None,
    };
    for &p in &args.p {
        for &range in &args.range {
            match args.formula {
                Formula::Theorem2 => {
                    let mut row = base(p, range);
                    row.analytic = alpha_asymptotic_uniform(p, range)?.value;
                    if args.oracle {
                        row.oracle = Some(mc_alpha_uniform(p, range, sample_count(args)? as usize, 1.0, args.seed)?);
                    }
                    rows.push(row);
                }
                Formula::Corollary2 => {
                    for &spacing in &args.spacing {
                        let mut row = base(p, range);
                        row.spacing = Some(spacing);
                        row.analytic = alpha_asymptotic_spaced(p, range, spacing)?.value;
                        if args.oracle {
                            row.oracle = Some(mc_alpha_spaced(p, range, spacing, sample_count(args)? as usize, args.seed)?);
                        }
                        rows.push(row);
                    }
                }
                Formula::Theorem3 => {
                    for &m in &args.m {
                        for &s in &args.s {
                            let zipf = ZipfPeriodicSubscription::new(m, s, args.c)?;
                            let mut row = base(p, range);
                            row.zipf = Some((m, s));
                            row.analytic = alpha_asymptotic_zipf_consecutive(p, range, &zipf)?.value;
                            if args.oracle {
                                let samples = sample_count(args)? as usize;
                                row.oracle = Some(mc_alpha_zipf_consecutive(p, range, &zipf, samples, args.seed)?);
                            }
                            rows.push(row);
                        }
                    }
                }
                Formula::Theorem1 | Formula::Corollary1 => {
                    for &views in &args.views {
                        for &copies in &args.n {
                            let desired: Vec<usize> =
                                if args.formula == Formula::Theorem1 { args.desired.clone() } else { vec![0] };
                            for d in desired {
                                rows.push(plan_row(args, p, range, views, copies, d)?);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn sample_count(args: &AnalyticArgs) -> Result<u64, CliError> {
    if args.samples == 0 {
        return Err(CliError::Config("--samples must be positive".into()));
    }
    Ok(args.samples)
}

/// Failure probability and obtained fraction on the plan "every view, `copies` times, on a
/// single link with loss `p`".
fn plan_row(args: &AnalyticArgs, p: f64, range: usize, views: usize, copies: u32, desired: usize) -> Result<AnalyticRow, CliError> {
    let cfg = SynthesisConfig::new(views, range)?;
    let link = Link::new(0, 0);
    let user = UserChannelState::new(UserId(0), [(link, p)])?;
    let mut plan = TransmissionPlan::new(views);
    for v in 1..=views {
        plan.set(v, link, copies)?;
    }
    let mut row = AnalyticRow {
        p,
        range,
        spacing: None,
        zipf: None,
        views: Some(views),
        copies: Some(copies),
        desired: None,
        analytic: f64::NAN,
        oracle: None,
    };
    if args.formula == Formula::Theorem1 {
        row.desired = Some(desired);
        row.analytic = view_failure_prob(&cfg, &user, &plan, desired)?;
        if args.oracle {
            let broadcasts = views * copies as usize;
            row.oracle = Some(if broadcasts <= ENUMERATION_LIMIT {
                McEstimate { mean: enumerate_failure_prob(&cfg, &user, &plan, desired)?, std_error: 0.0, samples: 0, rng_seed: args.seed }
            } else {
                let sub = Subscription::single(UserId(0), desired, views)?;
                let est = mc_expected_alpha(&cfg, &user, &plan, &sub, sample_count(args)?, args.seed)?;
                McEstimate { mean: 1.0 - est.mean, ..est }
            });
        }
    } else {
        let sub = Subscription::new(UserId(0), 1..=views, views)?;
        row.analytic = expected_alpha_exact(&cfg, &user, &plan, &sub)?.value;
        if args.oracle {
            row.oracle = Some(mc_expected_alpha(&cfg, &user, &plan, &sub, sample_count(args)?, args.seed)?);
        }
    }
    Ok(row)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn cmd_analytic(args: &AnalyticArgs) -> Result<(), CliError> {
    let rows = analytic_rows(args)?;
    let formula = args.formula.to_possible_value().expect("no skipped variants").get_name().to_string();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(ANALYTIC_COLUMNS)?;
    for row in &rows {
        wtr.write_record([
            formula.clone(),
            row.p.to_string(),
            row.range.to_string(),
            opt(row.spacing),
            opt(row.zipf.map(|z| z.0)),
            opt(row.zipf.map(|z| z.1)),
            opt(row.views),
            opt(row.copies),
            opt(row.desired),
            row.analytic.to_string(),
            opt(row.oracle.map(|o| o.mean)),
            opt(row.oracle.map(|o| o.std_error)),
            opt(row.oracle.map(|o| o.samples)),
            opt(row.oracle.map(|o| o.rng_seed)),
        ])?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::Io { path: "<buffer>".into(), source: e.into_error() })?;
    match &args.out {
        Some(path) => fs::write(path, bytes).map_err(io_err(path)),
        None => io::stdout().write_all(&bytes).map_err(io_err(Path::new("<stdout>"))),
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    /// `λ/μ` with `λ + μ` held fixed.
    LoadingRatio,
    DibrRange,
    Views,
    /// Initial population; also the steady state when `λ = μ`.
    Population,
    ArrivalProb,
    DepartureProb,
    ViewChangeProb,
    FailureThreshold,
    MaxAuxViews,
    MaxTxCount,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::LoadingRatio => "loading-ratio",
            SweepParameter::DibrRange => "dibr-range",
            SweepParameter::Views => "views",
            SweepParameter::Population => "population",
            SweepParameter::ArrivalProb => "arrival-prob",
            SweepParameter::DepartureProb => "departure-prob",
            SweepParameter::ViewChangeProb => "view-change-prob",
            SweepParameter::FailureThreshold => "failure-threshold",
            SweepParameter::MaxAuxViews => "max-aux-views",
            SweepParameter::MaxTxCount => "max-tx-count",
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig, CliError> {
        let count = || -> Result<usize, CliError> {
            if value.is_finite() && value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(CliError::Config(format!("{} needs a whole number, got {value}", self.name())))
            }
        };
        let mut cfg = base.clone();
        match self {
            SweepParameter::LoadingRatio => cfg.workload = cfg.workload.with_loading_ratio(value)?,
            SweepParameter::DibrRange => cfg.workload.dibr_range = count()?,
            SweepParameter::Views => cfg.workload.views = count()?,
            SweepParameter::Population => cfg.workload.initial_users = count()?,
            SweepParameter::ArrivalProb => cfg.workload.arrival_prob = value,
            SweepParameter::DepartureProb => cfg.workload.departure_prob = value,
            SweepParameter::ViewChangeProb => cfg.workload.view_change_prob = value,
            SweepParameter::FailureThreshold => cfg.protocol.failure_threshold = value,
            SweepParameter::MaxAuxViews => cfg.protocol.max_aux_views = count()?,
            SweepParameter::MaxTxCount => cfg.protocol.max_tx_count = count()? as u32,
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Swept parameter; none runs the single base scenario.
    pub parameter: Option<SweepParameter>,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub scheme: Scheme,
    /// Write per-frame rows (summary.csv is always written).
    pub frames_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("mvgmp-out"), scheme: Scheme::Both, frames_csv: true }
    }
}

/// The whole config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phy: PhyConfig,
    pub workload: WorkloadConfig,
    pub protocol: ProtocolParams,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig { phy: self.phy.clone(), workload: self.workload.clone(), protocol: self.protocol }
    }

    /// Sweep points in file order, each validated.
    pub fn points(&self) -> Result<Vec<SweepPoint>, CliError> {
        let base = self.scenario();
        let points = match self.sweep.parameter {
            None => {
                if !self.sweep.values.is_empty() {
                    return Err(CliError::Config("sweep.values given without sweep.parameter".into()));
                }
                vec![SweepPoint { parameter: None, value: None, config: base }]
            }
            Some(param) => {
                if self.sweep.values.is_empty() {
                    return Err(CliError::Config(format!("sweep over {} has no values", param.name())));
                }
                self.sweep
                    .values
                    .iter()
                    .map(|&v| Ok(SweepPoint { parameter: Some(param), value: Some(v), config: param.apply(&base, v)? }))
                    .collect::<Result<Vec<_>, CliError>>()?
            }
        };
        for p in &points {
            p.config.validate().map_err(|e| CliError::Config(format!("{}: {e}", p.label())))?;
        }
        Ok(points)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub parameter: Option<SweepParameter>,
    pub value: Option<f64>,
    pub config: ScenarioConfig,
}

impl SweepPoint {
    fn parameter_name(&self) -> &'static str {
        self.parameter.map(SweepParameter::name).unwrap_or("none")
    }

    fn value_text(&self) -> String {
        opt(self.value)
    }

    fn label(&self) -> String {
        match self.value {
            Some(v) => format!("{}={v}", self.parameter_name()),
            None => "base scenario".into(),
        }
    }
}

/// `--seed`, then the config file, then `MVGMP_SIM_SEED`, then 1.
pub fn resolve_seeds(cli: &[u64], config: &[u64], env: Option<&str>) -> Result<Vec<u64>, CliError> {
    if !cli.is_empty() {
        return Ok(cli.to_vec());
    }
    if !config.is_empty() {
        return Ok(config.to_vec());
    }
    if let Some(text) = env.map(str::trim).filter(|t| !t.is_empty()) {
        return text
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| CliError::Config(format!("{SEED_ENV}={text} is not a seed list"))))
            .collect();
    }
    Ok(vec![1])
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    manifest_id: &'a str,
    timestamp_unix: u64,
    config_path: String,
    output_dir: String,
    seeds: &'a [u64],
    config: &'a RunConfig,
}

/// Hash of the resolved config and seeds; identical inputs give identical ids
/// wherever the output goes.
pub fn manifest_id(config: &RunConfig, seeds: &[u64]) -> Result<String, CliError> {
    let mut config = config.clone();
    config.output.dir = PathBuf::new();
    let text = toml::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    for s in seeds {
        hasher.update(s.to_le_bytes());
    }
    Ok(hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
}

pub const FRAME_COLUMNS: [&str; 15] = [
    "manifest_id",
    "sweep_parameter",
    "sweep_value",
    "seed",
    "frame",
    "warmup",
    "population",
    "mvgmp_views",
    "baseline_views",
    "channel_time_mvgmp",
    "channel_time_baseline",
    "makespan_mvgmp",
    "makespan_baseline",
    "success_mvgmp",
    "success_baseline",
];

pub const SUMMARY_COLUMNS: [&str; 19] = [
    "manifest_id",
    "sweep_parameter",
    "sweep_value",
    "seed",
    "status",
    "frames",
    "mean_population",
    "mean_transmitted_views",
    "channel_time_mvgmp",
    "channel_time_mvgmp_ci95",
    "channel_time_baseline",
    "channel_time_baseline_ci95",
    "channel_time_ratio",
    "channel_time_ratio_ci95",
    "makespan_mvgmp",
    "makespan_baseline",
    "success_rate_mvgmp",
    "success_rate_baseline",
    "user_frames",
];

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

fn frame_record(id: &str, point: &SweepPoint, seed: u64, warmup: u64, f: &FrameOutcome) -> [String; 15] {
    let successes = |m: &BTreeMap<UserId, bool>| m.values().filter(|s| **s).count();
    [
        id.to_string(),
        point.parameter_name().to_string(),
        point.value_text(),
        seed.to_string(),
        f.frame.to_string(),
        u8::from(f.frame < warmup).to_string(),
        f.population.to_string(),
        opt(f.channel_time_mvgmp.map(|_| f.transmitted_views)),
        opt(f.channel_time_baseline.map(|_| f.baseline_views)),
        opt(f.channel_time_mvgmp),
        opt(f.channel_time_baseline),
        opt(f.makespan_mvgmp),
        opt(f.makespan_baseline),
        opt(f.channel_time_mvgmp.map(|_| successes(&f.success_mvgmp))),
        opt(f.channel_time_baseline.map(|_| successes(&f.success_baseline))),
    ]
}

fn seed_record(id: &str, point: &SweepPoint, seed: u64, s: &Summary) -> [String; 19] {
    let ci = |x: Option<f64>| x.map(|se| num(1.96 * se)).unwrap_or_default();
    let ratio = s.channel_time_ratio();
    [
        id.to_string(),
        point.parameter_name().to_string(),
        point.value_text(),
        seed.to_string(),
        s.status.to_string(),
        s.frames.to_string(),
        num(s.mean_population),
        num(s.mean_transmitted_views),
        s.mvgmp.map(|m| num(m.mean_channel_time)).unwrap_or_default(),
        ci(s.mvgmp.map(|m| m.channel_time_se)),
        s.baseline.map(|m| num(m.mean_channel_time)).unwrap_or_default(),
        ci(s.baseline.map(|m| m.channel_time_se)),
        ratio.map(num).unwrap_or_default(),
        String::new(),
        s.mvgmp.map(|m| num(m.mean_makespan)).unwrap_or_default(),
        s.baseline.map(|m| num(m.mean_makespan)).unwrap_or_default(),
        s.mvgmp.map(|m| num(m.success_rate)).unwrap_or_default(),
        s.baseline.map(|m| num(m.success_rate)).unwrap_or_default(),
        s.mvgmp.or(s.baseline).map(|m| m.user_frames.to_string()).unwrap_or_default(),
    ]
}

/// Mean and 95% half-width (Student t) of `xs`; the half-width is NaN for
/// fewer than two values.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom").inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

fn aggregate_record(id: &str, point: &SweepPoint, runs: &[Summary]) -> [String; 19] {
    let ok: Vec<&Summary> = runs.iter().filter(|s| s.frames > 0).collect();
    let collect = |f: &dyn Fn(&Summary) -> Option<f64>| ok.iter().filter_map(|s| f(s)).collect::<Vec<f64>>();
    let stat = |f: &dyn Fn(&Summary) -> Option<f64>| {
        let xs = collect(f);
        if xs.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, h) = mean_ci95(&xs);
            (num(m), num(h))
        }
    };
    let (ct_m, ct_m_ci) = stat(&|s| s.mvgmp.map(|m| m.mean_channel_time));
    let (ct_b, ct_b_ci) = stat(&|s| s.baseline.map(|m| m.mean_channel_time));
    let (ratio, ratio_ci) = stat(&|s| s.channel_time_ratio());
    let status = if ok.is_empty() { "insufficient-data" } else { "ok" };
    [
        id.to_string(),
        point.parameter_name().to_string(),
        point.value_text(),
        "all".to_string(),
        status.to_string(),
        runs.iter().map(|s| s.frames).sum::<u64>().to_string(),
        stat(&|s| Some(s.mean_population)).0,
        stat(&|s| Some(s.mean_transmitted_views)).0,
        ct_m,
        ct_m_ci,
        ct_b,
        ct_b_ci,
        ratio,
        ratio_ci,
        stat(&|s| s.mvgmp.map(|m| m.mean_makespan)).0,
        stat(&|s| s.baseline.map(|m| m.mean_makespan)).0,
        stat(&|s| s.mvgmp.map(|m| m.success_rate)).0,
        stat(&|s| s.baseline.map(|m| m.success_rate)).0,
        runs.iter().filter_map(|s| s.mvgmp.or(s.baseline)).map(|m| m.user_frames).sum::<u64>().to_string(),
    ]
}

/// What a finished `simulate` produced.
#[derive(Clone, Debug)]
pub struct SimulateReport {
    pub dir: PathBuf,
    pub manifest_id: String,
    pub seeds: Vec<u64>,
    /// One summary per (point, seed), points outermost.
    pub summaries: Vec<(SweepPoint, u64, Summary)>,
}

/// Files written so far; removed unless [`OutputGuard::keep`] is called.
struct OutputGuard {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    keep: bool,
}

impl OutputGuard {
    fn keep(mut self) {
        self.keep = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(dir) = &self.created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
}

struct JobResult {
    frames_csv: Vec<u8>,
    summary: Summary,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateReport, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(frames) = args.frames {
        if frames == 0 {
            return Err(CliError::Config("--frames must be at least 1".into()));
        }
        config.workload.frames = frames;
    }
    if let Some(scheme) = args.scheme {
        config.output.scheme = scheme;
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    let env = std::env::var(SEED_ENV).ok();
    let seeds = resolve_seeds(&args.seed, &config.sweep.seeds, env.as_deref())?;
    config.sweep.seeds = seeds.clone();
    let points = config.points()?;
    let id = manifest_id(&config, &seeds)?;
    let jobs = match args.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be at least 1".into())),
        other => other,
    };

    let dir = config.output.dir.clone();
    let mut guard = OutputGuard { files: Vec::new(), created_dir: None, keep: false };
    if !dir.exists() {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        guard.created_dir = Some(dir.clone());
    }

    let manifest = Manifest {
        tool: "mvgmp",
        version: env!("CARGO_PKG_VERSION"),
        manifest_id: &id,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config_path: args.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        output_dir: dir.display().to_string(),
        seeds: &seeds,
        config: &config,
    };
    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    guard.files.push(manifest_path.clone());
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    let frames_path = dir.join("frames.csv");
    let mut frames_out = if config.output.frames_csv {
        guard.files.push(frames_path.clone());
        let mut header = csv::Writer::from_writer(Vec::new());
        header.write_record(FRAME_COLUMNS)?;
        let header = header.into_inner().map_err(|e| CliError::Io { path: "<buffer>".into(), source: e.into_error() })?;
        let mut w = io::BufWriter::new(fs::File::create(&frames_path).map_err(io_err(&frames_path))?);
        w.write_all(&header).map_err(io_err(&frames_path))?;
        Some(w)
    } else {
        None
    };

    let tasks: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| seeds.iter().map(move |&s| (p, s))).collect();
    let scheme = config.output.scheme;
    let write_frames = frames_out.is_some();
    let abort = AtomicBool::new(false);
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = jobs {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Config(e.to_string()))?
    };

    let run_task = |&(p, seed): &(usize, u64)| -> Result<JobResult, CliError> {
        let point = &points[p];
        let warmup = point.config.workload.warmup;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let summary = run_scenario_streaming(&point.config, seed, scheme, |f| {
            if abort.load(Ordering::Relaxed) {
                return Err(Error::InvalidArgument("aborted".into()));
            }
            if write_frames {
                w.write_record(frame_record(&id, point, seed, warmup, f))
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            }
            Ok(())
        })?;
        let frames_csv = w.into_inner().map_err(|e| CliError::Io { path: "<buffer>".into(), source: e.into_error() })?;
        Ok(JobResult { frames_csv, summary })
    };

    // Workers run in any order; the collector writes in task order.
    let mut summaries: Vec<Option<Summary>> = vec![None; tasks.len()];
    let mut first_error: Option<CliError> = None;
    std::thread::scope(|scope| -> Result<(), CliError> {
        let (tx, rx) = mpsc::channel::<(usize, Result<JobResult, CliError>)>();
        let tasks = &tasks;
        let abort = &abort;
        let run_task = &run_task;
        let pool = &pool;
        scope.spawn(move || {
            pool.install(|| {
                tasks.par_iter().enumerate().for_each_with(tx, |tx, (i, task)| {
                    let result = if abort.load(Ordering::Relaxed) {
                        Err(CliError::Config("aborted".into()))
                    } else {
                        run_task(task)
                    };
                    let _ = tx.send((i, result));
                });
            });
        });
        let mut pending: BTreeMap<usize, JobResult> = BTreeMap::new();
        let mut next = 0;
        for (i, result) in rx {
            match result {
                Ok(job) => {
                    pending.insert(i, job);
                }
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    // Keep the first genuine error, not the follow-on aborts.
                    let replace = match (&first_error, &e) {
                        (None, _) => true,
                        (Some(CliError::Config(m)), _) | (Some(CliError::Model(Error::InvalidArgument(m))), _)
                            if m == "aborted" =>
                        {
                            true
                        }
                        _ => false,
                    };
                    if replace {
                        first_error = Some(e);
                    }
                }
            }
            if first_error.is_some() {
                continue;
            }
            while let Some(job) = pending.remove(&next) {
                if let Some(w) = frames_out.as_mut() {
                    w.write_all(&job.frames_csv).map_err(io_err(&frames_path))?;
                }
                summaries[next] = Some(job.summary);
                next += 1;
            }
        }
        Ok(())
    })?;
    if let Some(e) = first_error {
        return Err(e);
    }
    if let Some(mut w) = frames_out {
        w.flush().map_err(io_err(&frames_path))?;
    }

    let summaries: Vec<Summary> = summaries.into_iter().map(|s| s.expect("every task reported")).collect();
    let summary_path = dir.join("summary.csv");
    guard.files.push(summary_path.clone());
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    let mut report = Vec::new();
    for (p, point) in points.iter().enumerate() {
        let runs = &summaries[p * seeds.len()..(p + 1) * seeds.len()];
        for (seed, s) in seeds.iter().zip(runs) {
            w.write_record(seed_record(&id, point, *seed, s))?;
            report.push((point.clone(), *seed, s.clone()));
        }
        w.write_record(aggregate_record(&id, point, runs))?;
    }
    w.flush().map_err(io_err(&summary_path))?;
    guard.keep();
    Ok(SimulateReport { dir, manifest_id: id, seeds, summaries: report })
}

// ---------------------------------------------------------------- trace

#[derive(Clone, Debug, PartialEq)]
enum TraceEvent {
    Arrive { user: UserId, view: usize, loss: Vec<f64> },
    Leave(UserId),
    Change { user: UserId, view: usize },
    Silent(UserId),
    Move { user: UserId, loss: Vec<f64> },
    Tick,
}

#[derive(Clone, Debug)]
struct TraceSetup {
    views: usize,
    range: usize,
    channels: u8,
    params: ProtocolParams,
}

impl Default for TraceSetup {
    fn default() -> Self {
        TraceSetup { views: 8, range: 3, channels: 1, params: ProtocolParams::default() }
    }
}

fn parse_kv(tok: &str) -> Option<(&str, &str)> {
    tok.split_once('=')
}

/// `(frame, line, event)` in script order.
type TraceEvents = Vec<(u64, usize, TraceEvent)>;

fn parse_trace(path: &str, text: &str) -> Result<(TraceSetup, TraceEvents), CliError> {
    let mut setup = TraceSetup::default();
    let mut events = Vec::new();
    let mut last_frame = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| CliError::Script { path: path.to_string(), line: line_no, message };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] == "set" {
            if !events.is_empty() {
                return Err(err("`set` must come before the first event".into()));
            }
            for tok in &toks[1..] {
                let (k, v) = parse_kv(tok).ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
                let bad = || err(format!("bad value for {k}: `{v}`"));
                match k {
                    "views" => setup.views = v.parse().map_err(|_| bad())?,
                    "range" => setup.range = v.parse().map_err(|_| bad())?,
                    "channels" => setup.channels = v.parse().map_err(|_| bad())?,
                    "threshold" => setup.params.failure_threshold = v.parse().map_err(|_| bad())?,
                    "timeout" => setup.params.soft_state_timeout = v.parse().map_err(|_| bad())?,
                    "max_aux" => setup.params.max_aux_views = v.parse().map_err(|_| bad())?,
                    "max_tx" => setup.params.max_tx_count = v.parse().map_err(|_| bad())?,
                    "default_tx" => setup.params.default_tx_count = v.parse().map_err(|_| bad())?,
                    _ => return Err(err(format!("unknown setting `{k}`"))),
                }
            }
            continue;
        }
        let frame: u64 = toks[0].parse().map_err(|_| err(format!("expected a frame number, got `{}`", toks[0])))?;
        if frame < last_frame {
            return Err(err(format!("frame {frame} comes after frame {last_frame}")));
        }
        last_frame = frame;
        let verb = *toks.get(1).ok_or_else(|| err("missing event".into()))?;
        let user = || -> Result<UserId, CliError> {
            let t = toks.get(2).ok_or_else(|| err("missing user id".into()))?;
            t.parse().map(UserId).map_err(|_| err(format!("bad user id `{t}`")))
        };
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for tok in toks.iter().skip(3) {
            let (k, v) = parse_kv(tok).ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
            fields.insert(k, v);
        }
        let view = |fields: &BTreeMap<&str, &str>| -> Result<usize, CliError> {
            let v = fields.get("view").ok_or_else(|| err("missing view=".into()))?;
            v.parse().map_err(|_| err(format!("bad view `{v}`")))
        };
        let loss = |fields: &BTreeMap<&str, &str>| -> Result<Vec<f64>, CliError> {
            let v = fields.get("loss").ok_or_else(|| err("missing loss=".into()))?;
            v.split(',').map(|x| x.parse::<f64>().map_err(|_| err(format!("bad loss `{x}`")))).collect()
        };
        let expect_fields = |allowed: &[&str]| -> Result<(), CliError> {
            match fields.keys().find(|k| !allowed.contains(k)) {
                Some(k) => Err(err(format!("unexpected field `{k}` for `{verb}`"))),
                None => Ok(()),
            }
        };
        let event = match verb {
            "user" | "join" => {
                expect_fields(&["view", "loss"])?;
                TraceEvent::Arrive { user: user()?, view: view(&fields)?, loss: loss(&fields)? }
            }
            "leave" => {
                expect_fields(&[])?;
                TraceEvent::Leave(user()?)
            }
            "change" => {
                expect_fields(&["view"])?;
                TraceEvent::Change { user: user()?, view: view(&fields)? }
            }
            "silent" => {
                expect_fields(&[])?;
                TraceEvent::Silent(user()?)
            }
            "move" => {
                expect_fields(&["loss"])?;
                TraceEvent::Move { user: user()?, loss: loss(&fields)? }
            }
            "tick" => TraceEvent::Tick,
            other => return Err(err(format!("unknown event `{other}`"))),
        };
        events.push((frame, line_no, event));
    }
    Ok((setup, events))
}

/// One loss for every link, one per rate (all channels), or one per link
/// (channel-major).
fn trace_state(user: UserId, loss: &[f64], channels: u8, rates: u8) -> Result<UserChannelState, String> {
    let links = (0..channels).flat_map(|c| (0..rates).map(move |r| Link::new(c, r)));
    let per_link: Vec<(Link, f64)> = match loss.len() {
        1 => links.map(|l| (l, loss[0])).collect(),
        n if n == rates as usize => links.map(|l| (l, loss[l.rate as usize])).collect(),
        n if n == channels as usize * rates as usize => links.zip(loss.iter().copied()).collect(),
        n => return Err(format!("loss needs 1, {rates} or {} values, got {n}", channels as usize * rates as usize)),
    };
    UserChannelState::new(user, per_link).map_err(|e| e.to_string())
}

/// Replay `text` and return the trace lines.
pub fn replay_trace(path: &str, text: &str) -> Result<Vec<String>, CliError> {
    let (setup, events) = parse_trace(path, text)?;
    let mut phy = PhyConfig { num_channels: setup.channels, ..PhyConfig::default() };
    phy.validate().map_err(|e| CliError::Config(e.to_string()))?;
    setup.params.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let synthesis = SynthesisConfig::new(setup.views, setup.range).map_err(|e| CliError::Config(e.to_string()))?;
    let rates = phy.num_rates() as u8;
    let protocol = Protocol::new(synthesis, phy.durations(), setup.params).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cell = Cell::new(protocol, setup.channels, rates, true);
    cell.record_messages();
    phy.loss = Default::default();

    let mut out = Vec::new();
    let (Some(first), Some(last)) = (events.first().map(|e| e.0), events.last().map(|e| e.0)) else {
        return Ok(out);
    };
    let mut cursor = 0;
    for frame in first..=last {
        let start = cursor;
        while cursor < events.len() && events[cursor].0 == frame {
            cursor += 1;
        }
        let batch = &events[start..cursor];
        let at = |line: usize| move |e: Error| match e {
            Error::InvariantBreach(m) => CliError::Invariant(m),
            other => CliError::Script { path: path.to_string(), line, message: other.to_string() },
        };
        // Leaves and view-change Leaves, then reorganizations, then Joins.
        for (_, line, ev) in batch {
            match ev {
                TraceEvent::Leave(u) => {
                    cell.depart(*u).map_err(at(*line))?;
                }
                TraceEvent::Silent(u) => {
                    cell.vanish(*u).map_err(at(*line))?;
                }
                TraceEvent::Change { user, view } => cell.begin_change(*user, *view).map_err(at(*line))?,
                _ => {}
            }
        }
        cell.reorganize(frame).map_err(at(0))?;
        for (_, line, ev) in batch {
            match ev {
                TraceEvent::Arrive { user, view, loss } => {
                    let state = trace_state(*user, loss, setup.channels, rates)
                        .map_err(|m| CliError::Script { path: path.to_string(), line: *line, message: m })?;
                    let sub = Subscription::single(*user, *view, setup.views).map_err(at(*line))?;
                    cell.insert(ClientState::new(sub, state, &setup.params)).map_err(at(*line))?;
                    cell.join(*user, frame).map_err(at(*line))?;
                }
                TraceEvent::Change { user, .. } => {
                    cell.join(*user, frame).map_err(at(*line))?;
                }
                TraceEvent::Move { user, loss } => {
                    let state = trace_state(*user, loss, setup.channels, rates)
                        .map_err(|m| CliError::Script { path: path.to_string(), line: *line, message: m })?;
                    cell.set_channel_state(*user, state).map_err(at(*line))?;
                    cell.join(*user, frame).map_err(at(*line))?;
                }
                _ => {}
            }
        }
        cell.refresh_and_expire(frame);
        cell.check_invariants(frame)?;
        out.extend(cell.take_log());
        out.push(cell.table().trace_line(frame));
    }
    Ok(out)
}

pub fn cmd_trace(args: &TraceArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.script).map_err(io_err(&args.script))?;
    let lines = replay_trace(&args.script.display().to_string(), &text)?;
    let mut body = lines.join("\n");
    body.push('\n');
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("trace.txt");
            fs::write(&path, body).map_err(io_err(&path))
        }
        None => io::stdout().write_all(body.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}
