//! Command-line driver: `simulate`, `montecarlo`, `delay-trace` and `selfcheck`.
//!
//! Settings come from built-in defaults, then an optional TOML config file,
//! then command-line flags, later sources winning. Exit codes: 0 success,
//! 1 runtime or property failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use thiserror::Error;

use crate::channel::{write_delay_trace, ChannelError, DelayModel, LoadDistribution};
use crate::format::sig9;
use crate::kinematics::{RobotParams, WheelSpeeds};
use crate::scenario::{
    self, monte_carlo, parse_filters, write_run_csv, ScenarioConfig, ScenarioError, Trajectory,
};
use crate::selfcheck;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_RUNS: u64 = 200;
pub const DEFAULT_TRACE_SAMPLES: u64 = 100_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::InvalidConfig(_)
            | ScenarioError::UnknownFilter(_)
            | ScenarioError::UnknownTrajectory(_)
            | ScenarioError::UnknownAxis(_)
            | ScenarioError::Kinematics(_)
            | ScenarioError::Channel(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ChannelError> for CliError {
    fn from(e: ChannelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "delayed-fusion",
    version,
    about = "Delayed-measurement Kalman filtering for a networked robot"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write run.csv, summary.txt and summary.csv.
    Simulate(SimulateArgs),
    /// Run many seeds and compare the filters' position RMSE.
    Montecarlo(MonteCarloArgs),
    /// Sample the delay model and write delay_trace.csv.
    DelayTrace(DelayTraceArgs),
    /// Run the randomized estimator property suites.
    Selfcheck(SelfcheckArgs),
}

/// Delay-model flags; they apply to both links when given.
#[derive(Debug, Clone, Default, Args)]
pub struct DelayArgs {
    /// Fixed part of the delay in milliseconds.
    #[arg(long, value_name = "MS")]
    pub base_ms: Option<f64>,
    /// Mean of the load-dependent part in milliseconds.
    #[arg(long, value_name = "MS")]
    pub load_mean_ms: Option<f64>,
    /// Load distribution: constant, exponential or uniform.
    #[arg(long, value_name = "NAME")]
    pub load_dist: Option<String>,
    /// Width of the uniform load (defaults to twice the load mean).
    #[arg(long, value_name = "MS")]
    pub uniform_width_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// TOML config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of simulated steps.
    #[arg(long, value_name = "STEPS")]
    pub duration: Option<u64>,
    /// Comma-separated filters: ekf, po_ekf.
    #[arg(long, value_name = "LIST")]
    pub filters: Option<String>,
    /// Constant control-link delay in steps.
    #[arg(long, value_name = "STEPS")]
    pub n_fixed: Option<u64>,
    /// Constant measurement-link delay in steps.
    #[arg(long, value_name = "STEPS")]
    pub m_fixed: Option<u64>,
    /// straight or sinusoid.
    #[arg(long, value_name = "NAME")]
    pub trajectory: Option<String>,
    /// Leading steps left out of the summary statistics.
    #[arg(long, value_name = "STEPS")]
    pub warmup: Option<u64>,
    #[command(flatten)]
    pub delay: DelayArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Number of runs, seeds `seed .. seed + runs`.
    #[arg(long)]
    pub runs: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DelayTraceArgs {
    /// TOML config file; the measurement link's model is sampled.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<u64>,
    #[command(flatten)]
    pub delay: DelayArgs,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SelfcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    robot: Option<RobotSection>,
    noise: Option<NoiseSection>,
    trajectory: Option<TrajectorySection>,
    sim: Option<SimSection>,
    delay: Option<DelaySection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotSection {
    wheel_radius: Option<f64>,
    wheel_base: Option<f64>,
    sample_period: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseSection {
    delta: Option<f64>,
    /// Diagonal of the measurement covariance.
    meas_cov: Option<[f64; 3]>,
    /// Diagonal of the initial estimate covariance.
    init_cov: Option<[f64; 3]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectorySection {
    kind: Option<String>,
    omega: Option<f64>,
    amplitude: Option<f64>,
    period_ticks: Option<u64>,
    /// Per-tick `[omega_left, omega_right]` for `kind = "custom"`.
    table: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    duration: Option<u64>,
    seed: Option<u64>,
    filters: Option<Vec<String>>,
    warmup: Option<u64>,
    history_capacity: Option<usize>,
    runs: Option<u64>,
    out: Option<PathBuf>,
    samples: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DelaySection {
    control: Option<LinkSection>,
    meas: Option<LinkSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSection {
    base_ms: Option<f64>,
    load_mean_ms: Option<f64>,
    load_dist: Option<String>,
    uniform_width_ms: Option<f64>,
    /// Constant delay in steps; overrides the other link settings.
    fixed_steps: Option<u64>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn apply_delay_overrides(
    model: &mut DelayModel,
    base_ms: Option<f64>,
    load_mean_ms: Option<f64>,
    load_dist: Option<&str>,
    uniform_width_ms: Option<f64>,
) -> Result<(), CliError> {
    if let Some(b) = base_ms {
        model.base_ms = b;
    }
    if let Some(m) = load_mean_ms {
        model.load_mean_ms = m;
    }
    if let Some(name) = load_dist {
        model.load = name.parse::<LoadDistribution>()?;
        if let LoadDistribution::Uniform { width_ms } = &mut model.load {
            *width_ms = 2.0 * model.load_mean_ms;
        }
    }
    if let Some(w) = uniform_width_ms {
        match &mut model.load {
            LoadDistribution::Uniform { width_ms } => *width_ms = w,
            other => {
                return Err(CliError::Usage(format!(
                    "uniform width given for a {} load distribution",
                    other.name()
                )))
            }
        }
    }
    model.validate()?;
    Ok(())
}

fn apply_link_section(
    model: &mut DelayModel,
    link: &LinkSection,
    sample_period: f64,
) -> Result<(), CliError> {
    if let Some(steps) = link.fixed_steps {
        *model = DelayModel::fixed_steps(steps, sample_period).with_seed(model.seed);
        return Ok(());
    }
    apply_delay_overrides(
        model,
        link.base_ms,
        link.load_mean_ms,
        link.load_dist.as_deref(),
        link.uniform_width_ms,
    )
}

fn apply_delay_args(model: &mut DelayModel, args: &DelayArgs) -> Result<(), CliError> {
    apply_delay_overrides(
        model,
        args.base_ms,
        args.load_mean_ms,
        args.load_dist.as_deref(),
        args.uniform_width_ms,
    )
}

fn diag(v: [f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::from(v))
}

fn trajectory_from(
    section: &TrajectorySection,
    current: &Trajectory,
) -> Result<Trajectory, CliError> {
    let kind = section.kind.as_deref().unwrap_or(current.name());
    let mut traj = match kind.trim().to_ascii_lowercase().as_str() {
        "custom" => {
            let table = section.table.as_ref().ok_or_else(|| {
                CliError::Usage("trajectory.kind = \"custom\" needs trajectory.table".into())
            })?;
            Trajectory::Custom(
                table
                    .iter()
                    .map(|[l, r]| WheelSpeeds::new(*l, *r))
                    .collect(),
            )
        }
        _ if kind == current.name() => current.clone(),
        other => Trajectory::from_name(other)?,
    };
    match &mut traj {
        Trajectory::Straight { omega } => {
            if let Some(w) = section.omega {
                *omega = w;
            }
        }
        Trajectory::Sinusoid {
            omega,
            amplitude,
            period_ticks,
        } => {
            if let Some(w) = section.omega {
                *omega = w;
            }
            if let Some(a) = section.amplitude {
                *amplitude = a;
            }
            if let Some(p) = section.period_ticks {
                *period_ticks = p;
            }
        }
        Trajectory::Custom(_) => {}
    }
    Ok(traj)
}

/// Scenario from defaults, the config file, then flags. Also returns the
/// file's `sim` section for subcommand-specific settings.
fn build_scenario(args: &ScenarioArgs) -> Result<(ScenarioConfig, SimSection), CliError> {
    let file = read_config(args.config.as_deref())?;
    let mut cfg = ScenarioConfig::default();

    if let Some(r) = &file.robot {
        cfg.robot = RobotParams::new(
            r.wheel_radius.unwrap_or(cfg.robot.wheel_radius()),
            r.wheel_base.unwrap_or(cfg.robot.wheel_base()),
            r.sample_period.unwrap_or(cfg.robot.sample_period()),
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(n) = &file.noise {
        if let Some(d) = n.delta {
            cfg.delta = d;
        }
        if let Some(m) = n.meas_cov {
            cfg.meas_cov = diag(m);
        }
        if let Some(p) = n.init_cov {
            cfg.init_cov = diag(p);
        }
    }
    if let Some(t) = &file.trajectory {
        cfg.trajectory = trajectory_from(t, &cfg.trajectory)?;
    }
    let ts = cfg.robot.sample_period();
    if let Some(d) = &file.delay {
        if let Some(c) = &d.control {
            apply_link_section(&mut cfg.control_delay, c, ts)?;
        }
        if let Some(m) = &d.meas {
            apply_link_section(&mut cfg.meas_delay, m, ts)?;
        }
    }
    let sim = file.sim.unwrap_or_default();
    if let Some(d) = sim.duration {
        cfg.duration_steps = d;
    }
    if let Some(s) = sim.seed {
        cfg.seed = s;
    }
    if let Some(f) = &sim.filters {
        cfg.filters = parse_filters(&f.join(","))?;
    }
    if let Some(w) = sim.warmup {
        cfg.warmup = w;
    }
    if let Some(c) = sim.history_capacity {
        cfg.history_capacity = c;
    }

    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration {
        cfg.duration_steps = d;
    }
    if let Some(f) = &args.filters {
        cfg.filters = parse_filters(f)?;
    }
    if let Some(name) = &args.trajectory {
        cfg.trajectory = Trajectory::from_name(name)?;
    }
    if let Some(w) = args.warmup {
        cfg.warmup = w;
    }
    apply_delay_args(&mut cfg.control_delay, &args.delay)?;
    apply_delay_args(&mut cfg.meas_delay, &args.delay)?;
    if let Some(n) = args.n_fixed {
        cfg.control_delay = DelayModel::fixed_steps(n, ts).with_seed(cfg.control_delay.seed);
    }
    if let Some(m) = args.m_fixed {
        cfg.meas_delay = DelayModel::fixed_steps(m, ts).with_seed(cfg.meas_delay.seed);
    }
    cfg.validate()?;
    Ok((cfg, sim))
}

fn output_dir(flag: Option<&Path>, file: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or(file)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| {
        CliError::Runtime(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub summary: scenario::SummaryStats,
    pub run_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub summary_csv: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> Result<SimulateOutput, CliError> {
    let (cfg, sim) = build_scenario(&args.scenario)?;
    let dir = output_dir(args.out.as_deref(), sim.out.as_deref())?;
    let (record, summary) = scenario::run(&cfg)?;

    let run_csv = dir.join("run.csv");
    write_run_csv(&record, create(&run_csv)?)?;
    let summary_txt = dir.join("summary.txt");
    let mut txt = create(&summary_txt)?;
    txt.write_all(summary.to_text().as_bytes())
        .and_then(|_| txt.flush())
        .map_err(|e| io_error(&summary_txt, e))?;
    let summary_csv = dir.join("summary.csv");
    summary.write_csv(create(&summary_csv)?)?;

    print!("{}", summary.to_text());
    Ok(SimulateOutput {
        summary,
        run_csv,
        summary_txt,
        summary_csv,
    })
}

#[derive(Debug, Clone)]
pub struct MonteCarloOutput {
    pub report: scenario::MonteCarloReport,
    pub csv: PathBuf,
}

pub fn montecarlo(args: &MonteCarloArgs) -> Result<MonteCarloOutput, CliError> {
    let (cfg, sim) = build_scenario(&args.scenario)?;
    let runs = args.runs.or(sim.runs).unwrap_or(DEFAULT_RUNS);
    if runs < 1 {
        return Err(CliError::Usage("runs must be >= 1".into()));
    }
    let dir = output_dir(args.out.as_deref(), sim.out.as_deref())?;
    let report = monte_carlo(&cfg, runs)?;
    let csv = dir.join("montecarlo.csv");
    report.write_csv(create(&csv)?)?;

    println!("runs={runs}");
    for d in &report.position_rmse {
        println!("{}.rmse_position.mean={}", d.filter.name(), sig9(d.mean));
        println!(
            "{}.rmse_position.median={}",
            d.filter.name(),
            sig9(d.median)
        );
    }
    if let Some(w) = report.po_ekf_win_fraction {
        println!("po_ekf_win_fraction={}", sig9(w));
    }
    Ok(MonteCarloOutput { report, csv })
}

#[derive(Debug, Clone)]
pub struct DelayTraceOutput {
    pub mean_ms: f64,
    pub csv: PathBuf,
}

pub fn delay_trace(args: &DelayTraceArgs) -> Result<DelayTraceOutput, CliError> {
    let (cfg, sim) = build_scenario(&ScenarioArgs {
        config: args.config.clone(),
        ..ScenarioArgs::default()
    })?;
    let mut model = cfg.meas_delay;
    apply_delay_args(&mut model, &args.delay)?;
    if let Some(s) = args.seed {
        model.seed = s;
    }
    let samples = args
        .samples
        .or(sim.samples)
        .unwrap_or(DEFAULT_TRACE_SAMPLES);
    if samples < 1 {
        return Err(CliError::Usage("samples must be >= 1".into()));
    }
    let dir = output_dir(args.out.as_deref(), sim.out.as_deref())?;
    let csv = dir.join("delay_trace.csv");
    let mean_ms =
        write_delay_trace(&model, samples, create(&csv)?).map_err(|e| io_error(&csv, e))?;
    println!("samples={samples}");
    println!("model_mean_ms={}", sig9(model.mean_ms()));
    println!("mean_ms={}", sig9(mean_ms));
    Ok(DelayTraceOutput { mean_ms, csv })
}

pub fn selfcheck(args: &SelfcheckArgs) -> Result<Vec<selfcheck::PropertyReport>, CliError> {
    let reports = selfcheck::run_all(args.seed.unwrap_or(selfcheck::DEFAULT_SEED));
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Runtime(format!(
            "failing properties: {}",
            failed.join(", ")
        )))
    }
}

fn exit_code<T>(result: Result<T, CliError>) -> i32 {
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    exit_code(simulate(args))
}

pub fn cmd_montecarlo(args: &MonteCarloArgs) -> i32 {
    exit_code(montecarlo(args))
}

pub fn cmd_delay_trace(args: &DelayTraceArgs) -> i32 {
    exit_code(delay_trace(args))
}

pub fn cmd_selfcheck(args: &SelfcheckArgs) -> i32 {
    exit_code(selfcheck(args))
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Montecarlo(a) => cmd_montecarlo(a),
        Command::DelayTrace(a) => cmd_delay_trace(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}
