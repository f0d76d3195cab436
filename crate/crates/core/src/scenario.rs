//! Open-loop simulation of a networked differential-drive robot.
//!
//! Each tick a command travels through the control link to the actuator,
//! the true pose advances under the applied command plus wheel-speed noise,
//! and a noisy pose measurement travels back through the measurement link.
//! A delay-aware filter (PO-EKF) and a delay-naive EKF both estimate the pose.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{ChannelError, ChannelState, DelayModel, LoadDistribution};
use crate::estimator::{
    EstimatorError, ExtendedKalmanFilter, FuseOutcome, HistoryBuffer, PoExtendedKalmanFilter,
};
use crate::format::sig9;
use crate::kinematics::{self, wrap_angle, KinematicsError, Pose, RobotParams, WheelSpeeds};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("unknown filter '{0}' (expected ekf or po_ekf)")]
    UnknownFilter(String),
    #[error("unknown trajectory '{0}' (expected straight, sinusoid or custom)")]
    UnknownTrajectory(String),
    #[error("unknown axis '{0}' (expected x, y, theta or position)")]
    UnknownAxis(String),
    #[error("filter {filter} is not part of this run")]
    FilterNotInRun { filter: FilterKind },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("{filter} failed at tick {tick}: {source}")]
    Estimator {
        filter: FilterKind,
        tick: u64,
        #[source]
        source: EstimatorError,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_OMEGA: f64 = 2.0;
pub const DEFAULT_SINE_AMPLITUDE: f64 = 0.5;
pub const DEFAULT_SINE_PERIOD: u64 = 100;
pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_DURATION: u64 = 500;
pub const DEFAULT_MEAS_COV_DIAG: [f64; 3] = [0.01, 0.01, 0.018];
pub const DEFAULT_INIT_COV_DIAG: [f64; 3] = [1e-4, 1e-4, 1e-4];
pub const DEFAULT_DELAY_BASE_MS: f64 = 400.0;
pub const DEFAULT_DELAY_LOAD_MEAN_MS: f64 = 83.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Straight {
        omega: f64,
    },
    Sinusoid {
        omega: f64,
        amplitude: f64,
        period_ticks: u64,
    },
    /// Per-tick wheel speeds; the last entry is held past the end.
    Custom(Vec<WheelSpeeds>),
}

impl Trajectory {
    pub fn straight() -> Self {
        Trajectory::Straight {
            omega: DEFAULT_OMEGA,
        }
    }

    pub fn sinusoid() -> Self {
        Trajectory::Sinusoid {
            omega: DEFAULT_OMEGA,
            amplitude: DEFAULT_SINE_AMPLITUDE,
            period_ticks: DEFAULT_SINE_PERIOD,
        }
    }

    /// Default profile for `straight` or `sinusoid`.
    pub fn from_name(name: &str) -> Result<Self, ScenarioError> {
        match name.trim().to_ascii_lowercase().as_str() {
            "straight" => Ok(Self::straight()),
            "sinusoid" | "sine" => Ok(Self::sinusoid()),
            _ => Err(ScenarioError::UnknownTrajectory(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Trajectory::Straight { .. } => "straight",
            Trajectory::Sinusoid { .. } => "sinusoid",
            Trajectory::Custom(_) => "custom",
        }
    }
}

/// Commanded wheel speeds at `tick`.
pub fn wheel_profile(trajectory: &Trajectory, tick: u64) -> WheelSpeeds {
    match trajectory {
        Trajectory::Straight { omega } => WheelSpeeds::new(*omega, *omega),
        Trajectory::Sinusoid {
            omega,
            amplitude,
            period_ticks,
        } => {
            let phase = std::f64::consts::TAU * tick as f64 / *period_ticks as f64;
            let s = amplitude * phase.sin();
            WheelSpeeds::new(omega + s, omega - s)
        }
        Trajectory::Custom(table) => {
            let idx = usize::try_from(tick)
                .unwrap_or(usize::MAX)
                .min(table.len().saturating_sub(1));
            table.get(idx).copied().unwrap_or(WheelSpeeds::ZERO)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterKind {
    Ekf,
    PoEkf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 2] = [FilterKind::Ekf, FilterKind::PoEkf];

    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Ekf => "ekf",
            FilterKind::PoEkf => "po_ekf",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ekf" => Ok(FilterKind::Ekf),
            "po_ekf" | "poekf" => Ok(FilterKind::PoEkf),
            _ => Err(ScenarioError::UnknownFilter(s.to_string())),
        }
    }
}

/// Parses a comma-separated filter list, e.g. `ekf,po_ekf`.
pub fn parse_filters(list: &str) -> Result<Vec<FilterKind>, ScenarioError> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let kind: FilterKind = part.parse()?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub robot: RobotParams,
    /// Input-noise scale: wheel-speed variance is `delta * omega^2`.
    pub delta: f64,
    pub meas_cov: Matrix3<f64>,
    /// Covariance of the filters' initial pose estimate.
    pub init_cov: Matrix3<f64>,
    pub trajectory: Trajectory,
    pub duration_steps: u64,
    pub control_delay: DelayModel,
    pub meas_delay: DelayModel,
    pub seed: u64,
    pub filters: Vec<FilterKind>,
    /// Leading ticks excluded from the summary statistics.
    pub warmup: u64,
    pub history_capacity: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let delay = DelayModel {
            base_ms: DEFAULT_DELAY_BASE_MS,
            load_mean_ms: DEFAULT_DELAY_LOAD_MEAN_MS,
            load: LoadDistribution::Exponential,
            seed: 0,
        };
        Self {
            robot: RobotParams::default(),
            delta: DEFAULT_DELTA,
            meas_cov: Matrix3::from_diagonal(&Vector3::from(DEFAULT_MEAS_COV_DIAG)),
            init_cov: Matrix3::from_diagonal(&Vector3::from(DEFAULT_INIT_COV_DIAG)),
            trajectory: Trajectory::straight(),
            duration_steps: DEFAULT_DURATION,
            control_delay: delay,
            meas_delay: delay.with_seed(1),
            seed: 0,
            filters: FilterKind::ALL.to_vec(),
            warmup: 0,
            history_capacity: HistoryBuffer::DEFAULT_CAPACITY,
        }
    }
}

impl ScenarioConfig {
    /// Both links with constant delays of `n` and `m` ticks.
    pub fn with_fixed_delays(mut self, n: u64, m: u64) -> Self {
        let ts = self.robot.sample_period();
        self.control_delay = DelayModel::fixed_steps(n, ts);
        self.meas_delay = DelayModel::fixed_steps(m, ts);
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::InvalidConfig(msg));
        if self.duration_steps < 1 {
            return invalid("duration must be at least 1 step".into());
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return invalid(format!("delta must be >= 0, got {}", self.delta));
        }
        if (self.meas_cov - self.meas_cov.transpose()).amax() > 1e-12
            || self.meas_cov.cholesky().is_none()
        {
            return invalid("measurement covariance must be symmetric positive definite".into());
        }
        if (self.init_cov - self.init_cov.transpose()).amax() > 1e-12
            || self.init_cov.symmetric_eigenvalues().min() < 0.0
        {
            return invalid("initial covariance must be symmetric positive semi-definite".into());
        }
        if self.filters.is_empty() {
            return invalid("at least one filter must be enabled".into());
        }
        if self.history_capacity < 1 {
            return invalid("history capacity must be >= 1".into());
        }
        match &self.trajectory {
            Trajectory::Custom(table) if table.is_empty() => {
                return invalid("custom trajectory table is empty".into())
            }
            Trajectory::Custom(table) if table.iter().any(|w| !w.is_finite()) => {
                return invalid("custom trajectory has non-finite speeds".into())
            }
            Trajectory::Sinusoid {
                period_ticks: 0, ..
            } => return invalid("sinusoid period must be >= 1 tick".into()),
            Trajectory::Straight { omega } | Trajectory::Sinusoid { omega, .. }
                if !omega.is_finite() =>
            {
                return invalid("wheel speed must be finite".into())
            }
            _ => {}
        }
        self.control_delay.validate()?;
        self.meas_delay.validate()?;
        Ok(())
    }
}

/// A measurement as seen by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementEvent {
    pub value: Pose,
    pub origin: u64,
    pub arrival: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSample {
    pub estimate: Pose,
    pub cov_trace: f64,
    /// Estimate minus truth, heading wrapped.
    pub deviation: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickRow {
    pub tick: u64,
    pub truth: Pose,
    pub commanded: WheelSpeeds,
    pub applied: WheelSpeeds,
    /// Measurements delivered to the estimators this tick.
    pub delivered: Vec<MeasurementEvent>,
    /// One entry per filter, in [`RunRecord::filters`] order.
    pub filters: Vec<FilterSample>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionCounts {
    pub polled: usize,
    pub fused: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub filters: Vec<FilterKind>,
    pub rows: Vec<TickRow>,
    pub fusion: Vec<FusionCounts>,
}

impl RunRecord {
    pub fn filter_index(&self, kind: FilterKind) -> Result<usize, ScenarioError> {
        self.filters
            .iter()
            .position(|k| *k == kind)
            .ok_or(ScenarioError::FilterNotInRun { filter: kind })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSummary {
    pub filter: FilterKind,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_theta: f64,
    pub rmse_position: f64,
    pub mean_abs: [f64; 3],
    pub max_abs: [f64; 3],
    pub fused: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DelaySummary {
    pub mean_control_steps: f64,
    pub mean_control_ms: f64,
    pub mean_meas_steps: f64,
    pub mean_meas_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub warmup: u64,
    pub filters: Vec<FilterSummary>,
    pub delay: DelaySummary,
}

impl SummaryStats {
    pub fn filter(&self, kind: FilterKind) -> Option<&FilterSummary> {
        self.filters.iter().find(|f| f.filter == kind)
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("warmup".to_string(), self.warmup.to_string()),
            (
                "delay.control.mean_steps".to_string(),
                sig9(self.delay.mean_control_steps),
            ),
            (
                "delay.control.mean_ms".to_string(),
                sig9(self.delay.mean_control_ms),
            ),
            (
                "delay.meas.mean_steps".to_string(),
                sig9(self.delay.mean_meas_steps),
            ),
            (
                "delay.meas.mean_ms".to_string(),
                sig9(self.delay.mean_meas_ms),
            ),
        ];
        for f in &self.filters {
            let p = f.filter.name();
            kv.push((format!("{p}.rmse_x"), sig9(f.rmse_x)));
            kv.push((format!("{p}.rmse_y"), sig9(f.rmse_y)));
            kv.push((format!("{p}.rmse_theta"), sig9(f.rmse_theta)));
            kv.push((format!("{p}.rmse_position"), sig9(f.rmse_position)));
            for (i, axis) in ["x", "y", "theta"].iter().enumerate() {
                kv.push((format!("{p}.mean_abs_{axis}"), sig9(f.mean_abs[i])));
                kv.push((format!("{p}.max_abs_{axis}"), sig9(f.max_abs[i])));
            }
            kv.push((format!("{p}.fused"), f.fused.to_string()));
            kv.push((format!("{p}.rejected"), f.rejected.to_string()));
        }
        kv
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        self.key_values()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Two-column `key,value` CSV with the same entries as [`Self::to_text`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ScenarioError> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["key", "value"])?;
        for (k, v) in self.key_values() {
            wtr.write_record([k, v])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

enum Estimator {
    Ekf(ExtendedKalmanFilter),
    PoEkf(PoExtendedKalmanFilter),
}

/// Per-run seed for a link, so Monte Carlo runs see independent delays.
fn link_seed(model_seed: u64, run_seed: u64, link: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(0x11ac_0000 + link);
    rng.random::<u64>() ^ model_seed
}

fn noise_std(variance: f64) -> f64 {
    variance.max(0.0).sqrt()
}

/// Runs one simulation.
pub fn run(config: &ScenarioConfig) -> Result<(RunRecord, SummaryStats), ScenarioError> {
    config.validate()?;
    let params = config.robot;
    let ts = params.sample_period();

    let mut control_link: ChannelState<WheelSpeeds> = ChannelState::new(
        config
            .control_delay
            .with_seed(link_seed(config.control_delay.seed, config.seed, 0)),
        ts,
    )?;
    let mut meas_link: ChannelState<Pose> = ChannelState::new(
        config
            .meas_delay
            .with_seed(link_seed(config.meas_delay.seed, config.seed, 1)),
        ts,
    )?;

    let mut process_rng = ChaCha8Rng::seed_from_u64(config.seed);
    process_rng.set_stream(1);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sensor_rng.set_stream(2);
    let meas_chol = config
        .meas_cov
        .cholesky()
        .ok_or_else(|| {
            ScenarioError::InvalidConfig("measurement covariance not positive definite".into())
        })?
        .l();

    let initial = Pose::default();
    let mut filters = Vec::with_capacity(config.filters.len());
    for kind in &config.filters {
        let wrap = |source| ScenarioError::Estimator {
            filter: *kind,
            tick: 0,
            source,
        };
        filters.push(match kind {
            FilterKind::Ekf => Estimator::Ekf(
                ExtendedKalmanFilter::new(
                    params,
                    config.delta,
                    config.meas_cov,
                    initial,
                    config.init_cov,
                )
                .map_err(wrap)?,
            ),
            FilterKind::PoEkf => Estimator::PoEkf(
                PoExtendedKalmanFilter::new(
                    params,
                    config.delta,
                    config.meas_cov,
                    initial,
                    config.init_cov,
                    config.history_capacity,
                )
                .map_err(wrap)?,
            ),
        });
    }
    let mut fusion = vec![FusionCounts::default(); filters.len()];

    let mut truth = initial;
    let mut held: Option<(u64, WheelSpeeds)> = None;
    let mut rows = Vec::with_capacity(config.duration_steps as usize);

    for tick in 0..config.duration_steps {
        let commanded = wheel_profile(&config.trajectory, tick);
        control_link.send(commanded, tick);
        for msg in control_link.poll(tick) {
            // Zero-order hold; a command older than the one held is stale.
            if held.is_none_or(|(origin, _)| msg.origin_step >= origin) {
                held = Some((msg.origin_step, msg.payload));
            }
        }
        let applied = held.map_or(WheelSpeeds::ZERO, |(_, u)| u);

        // Wheel-speed noise, variance delta * omega^2 per wheel.
        let nl: f64 = process_rng.sample(StandardNormal);
        let nr: f64 = process_rng.sample(StandardNormal);
        let q = kinematics::process_noise_cov(applied, config.delta)?;
        let disturbed = WheelSpeeds::new(
            applied.omega_left + noise_std(q[(1, 1)]) * nl,
            applied.omega_right + noise_std(q[(0, 0)]) * nr,
        );
        truth = kinematics::step(truth, disturbed, &params)?;

        let white = Vector3::new(
            sensor_rng.sample(StandardNormal),
            sensor_rng.sample(StandardNormal),
            sensor_rng.sample(StandardNormal),
        );
        let noise = meas_chol * white;
        let measured = Pose::new(
            truth.x + noise[0],
            truth.y + noise[1],
            truth.theta + noise[2],
        );
        meas_link.send(measured, tick);

        for (idx, filter) in filters.iter_mut().enumerate() {
            let kind = config.filters[idx];
            let res = match filter {
                Estimator::Ekf(f) => f.time_update(commanded),
                Estimator::PoEkf(f) => f.time_update(applied),
            };
            res.map_err(|source| ScenarioError::Estimator {
                filter: kind,
                tick,
                source,
            })?;
        }

        let delivered: Vec<MeasurementEvent> = meas_link
            .poll(tick)
            .into_iter()
            .map(|m| MeasurementEvent {
                value: m.payload,
                origin: m.origin_step,
                arrival: m.delivery_step,
            })
            .collect();

        let mut samples = Vec::with_capacity(filters.len());
        for (idx, filter) in filters.iter_mut().enumerate() {
            let kind = config.filters[idx];
            let err = |source| ScenarioError::Estimator {
                filter: kind,
                tick,
                source,
            };
            for ev in &delivered {
                fusion[idx].polled += 1;
                match filter {
                    Estimator::Ekf(f) => {
                        f.update(&ev.value).map_err(err)?;
                        fusion[idx].fused += 1;
                    }
                    // Filter step s holds the state after tick s - 1.
                    Estimator::PoEkf(f) => match f.fuse(&ev.value, ev.origin + 1).map_err(err)? {
                        FuseOutcome::Fused { .. } => fusion[idx].fused += 1,
                        FuseOutcome::RejectedOutOfOrder { .. } => fusion[idx].rejected += 1,
                    },
                }
            }
            let (pose, cov_trace) = match filter {
                Estimator::Ekf(f) => (f.pose(), f.estimate().covariance.trace()),
                Estimator::PoEkf(f) => (f.pose(), f.estimate().covariance.trace()),
            };
            samples.push(FilterSample {
                estimate: pose,
                cov_trace,
                deviation: pose.deviation_from(&truth),
            });
        }

        rows.push(TickRow {
            tick,
            truth,
            commanded,
            applied,
            delivered,
            filters: samples,
        });
    }

    let record = RunRecord {
        filters: config.filters.clone(),
        rows,
        fusion,
    };
    let control = control_link.stats();
    let meas = meas_link.stats();
    let delay = DelaySummary {
        mean_control_steps: control.mean_delay_steps(),
        mean_control_ms: control.mean_delay_ms(),
        mean_meas_steps: meas.mean_delay_steps(),
        mean_meas_ms: meas.mean_delay_ms(),
    };
    let summary = summarize(&record, config.warmup, delay);
    Ok((record, summary))
}

/// Summary statistics over the ticks after `warmup`.
pub fn summarize(record: &RunRecord, warmup: u64, delay: DelaySummary) -> SummaryStats {
    let filters = record
        .filters
        .iter()
        .enumerate()
        .map(|(idx, kind)| {
            let mut sq = [0.0f64; 3];
            let mut abs = [0.0f64; 3];
            let mut max = [0.0f64; 3];
            let mut count = 0usize;
            for row in record.rows.iter().filter(|r| r.tick >= warmup) {
                let dev = row.filters[idx].deviation;
                for a in 0..3 {
                    sq[a] += dev[a] * dev[a];
                    abs[a] += dev[a].abs();
                    max[a] = max[a].max(dev[a].abs());
                }
                count += 1;
            }
            let n = count.max(1) as f64;
            let counts = record.fusion.get(idx).copied().unwrap_or_default();
            FilterSummary {
                filter: *kind,
                rmse_x: (sq[0] / n).sqrt(),
                rmse_y: (sq[1] / n).sqrt(),
                rmse_theta: (sq[2] / n).sqrt(),
                rmse_position: ((sq[0] + sq[1]) / n).sqrt(),
                mean_abs: abs.map(|s| s / n),
                max_abs: max,
                fused: counts.fused,
                rejected: counts.rejected,
            }
        })
        .collect();
    SummaryStats {
        warmup,
        filters,
        delay,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Theta,
    PositionNorm,
}

impl FromStr for Axis {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "theta" => Ok(Axis::Theta),
            "position" | "position-norm" | "norm" => Ok(Axis::PositionNorm),
            _ => Err(ScenarioError::UnknownAxis(s.to_string())),
        }
    }
}

/// Per-tick deviation of one filter along one axis.
pub fn deviation_series(
    record: &RunRecord,
    filter: FilterKind,
    axis: Axis,
) -> Result<Vec<(u64, f64)>, ScenarioError> {
    let idx = record.filter_index(filter)?;
    Ok(record
        .rows
        .iter()
        .map(|row| {
            let d = row.filters[idx].deviation;
            let v = match axis {
                Axis::X => d[0],
                Axis::Y => d[1],
                Axis::Theta => wrap_angle(d[2]),
                Axis::PositionNorm => d[0].hypot(d[1]),
            };
            (row.tick, v)
        })
        .collect())
}

/// Column names of [`write_run_csv`].
pub fn run_csv_header(filters: &[FilterKind]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "tick",
        "truth_x",
        "truth_y",
        "truth_theta",
        "cmd_wl",
        "cmd_wr",
        "applied_wl",
        "applied_wr",
        "meas_x",
        "meas_y",
        "meas_theta",
        "meas_origin",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for f in filters {
        for c in [
            "est_x",
            "est_y",
            "est_theta",
            "cov_trace",
            "dev_x",
            "dev_y",
            "dev_theta",
        ] {
            cols.push(format!("{}_{c}", f.name()));
        }
    }
    cols
}

/// Writes one CSV row per tick. The measurement columns hold the most
/// recent measurement delivered that tick and are empty when none arrived.
pub fn write_run_csv<W: Write>(record: &RunRecord, out: W) -> Result<(), ScenarioError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(run_csv_header(&record.filters))?;
    for row in &record.rows {
        let mut fields = vec![
            row.tick.to_string(),
            sig9(row.truth.x),
            sig9(row.truth.y),
            sig9(row.truth.theta),
            sig9(row.commanded.omega_left),
            sig9(row.commanded.omega_right),
            sig9(row.applied.omega_left),
            sig9(row.applied.omega_right),
        ];
        match row.delivered.last() {
            Some(m) => fields.extend([
                sig9(m.value.x),
                sig9(m.value.y),
                sig9(m.value.theta),
                m.origin.to_string(),
            ]),
            None => fields.extend(std::iter::repeat_n(String::new(), 4)),
        }
        for s in &row.filters {
            fields.extend([
                sig9(s.estimate.x),
                sig9(s.estimate.y),
                sig9(s.estimate.theta),
                sig9(s.cov_trace),
                sig9(s.deviation[0]),
                sig9(s.deviation[1]),
                sig9(s.deviation[2]),
            ]);
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRun {
    pub seed: u64,
    pub filters: Vec<FilterSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseDistribution {
    pub filter: FilterKind,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub runs: Vec<MonteCarloRun>,
    pub position_rmse: Vec<RmseDistribution>,
    /// Fraction of runs where the PO-EKF's position RMSE is below the EKF's;
    /// `None` unless both filters ran.
    pub po_ekf_win_fraction: Option<f64>,
}

impl MonteCarloReport {
    pub fn distribution(&self, kind: FilterKind) -> Option<&RmseDistribution> {
        self.position_rmse.iter().find(|d| d.filter == kind)
    }

    /// One row per run: seed, then rmse_x, rmse_y, rmse_theta, rmse_position
    /// per filter.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ScenarioError> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["seed".to_string()];
        if let Some(first) = self.runs.first() {
            for f in &first.filters {
                for c in ["rmse_x", "rmse_y", "rmse_theta", "rmse_position"] {
                    header.push(format!("{}_{c}", f.filter.name()));
                }
            }
        }
        wtr.write_record(&header)?;
        for run in &self.runs {
            let mut fields = vec![run.seed.to_string()];
            for f in &run.filters {
                fields.extend([
                    sig9(f.rmse_x),
                    sig9(f.rmse_y),
                    sig9(f.rmse_theta),
                    sig9(f.rmse_position),
                ]);
            }
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

/// Runs seeds `config.seed .. config.seed + runs` in parallel.
pub fn monte_carlo(config: &ScenarioConfig, runs: u64) -> Result<MonteCarloReport, ScenarioError> {
    if runs < 1 {
        return Err(ScenarioError::InvalidConfig("runs must be >= 1".into()));
    }
    config.validate()?;
    let results: Vec<Result<MonteCarloRun, ScenarioError>> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(i);
            let (_, summary) = run(&cfg)?;
            Ok(MonteCarloRun {
                seed: cfg.seed,
                filters: summary.filters,
            })
        })
        .collect();
    let runs: Vec<MonteCarloRun> = results.into_iter().collect::<Result<_, _>>()?;

    let position_rmse = config
        .filters
        .iter()
        .enumerate()
        .map(|(idx, kind)| {
            let mut values: Vec<f64> = runs.iter().map(|r| r.filters[idx].rmse_position).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            RmseDistribution {
                filter: *kind,
                mean,
                median: median(&mut values),
            }
        })
        .collect();

    let ekf = config.filters.iter().position(|k| *k == FilterKind::Ekf);
    let po = config.filters.iter().position(|k| *k == FilterKind::PoEkf);
    let po_ekf_win_fraction = match (ekf, po) {
        (Some(e), Some(p)) => {
            let wins = runs
                .iter()
                .filter(|r| r.filters[p].rmse_position < r.filters[e].rmse_position)
                .count();
            Some(wins as f64 / runs.len() as f64)
        }
        _ => None,
    };

    Ok(MonteCarloReport {
        runs,
        position_rmse,
        po_ekf_win_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        assert_eq!(
            wheel_profile(&Trajectory::straight(), 0),
            WheelSpeeds::new(2.0, 2.0)
        );
        assert_eq!(
            wheel_profile(&Trajectory::straight(), 917),
            WheelSpeeds::new(2.0, 2.0)
        );
        assert_eq!(
            wheel_profile(&Trajectory::sinusoid(), 0),
            WheelSpeeds::new(2.0, 2.0)
        );
        let w = wheel_profile(&Trajectory::sinusoid(), 25);
        assert!((w.omega_left - 2.5).abs() < 1e-12);
        assert!((w.omega_right - 1.5).abs() < 1e-12);
        let custom =
            Trajectory::Custom(vec![WheelSpeeds::new(1.0, 2.0), WheelSpeeds::new(3.0, 4.0)]);
        assert_eq!(wheel_profile(&custom, 0), WheelSpeeds::new(1.0, 2.0));
        assert_eq!(wheel_profile(&custom, 10), WheelSpeeds::new(3.0, 4.0));
        assert!(Trajectory::from_name("spiral").is_err());
    }

    #[test]
    fn filter_names() {
        assert_eq!(
            parse_filters("po_ekf,ekf").unwrap(),
            vec![FilterKind::Ekf, FilterKind::PoEkf]
        );
        assert_eq!(parse_filters("ekf").unwrap(), vec![FilterKind::Ekf]);
        assert!(matches!(
            parse_filters("ekf,ukf"),
            Err(ScenarioError::UnknownFilter(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ScenarioConfig::default();
        assert!(c.validate().is_ok());
        c.duration_steps = 0;
        assert!(matches!(c.validate(), Err(ScenarioError::InvalidConfig(_))));
        let c = ScenarioConfig {
            meas_cov: Matrix3::zeros(),
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::default();
        c.filters.clear();
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            trajectory: Trajectory::Custom(vec![]),
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn small_record() -> RunRecord {
        let sample = |dx: f64, dy: f64| FilterSample {
            estimate: Pose::default(),
            cov_trace: 0.0,
            deviation: Vector3::new(dx, dy, 0.0),
        };
        RunRecord {
            filters: vec![FilterKind::PoEkf],
            rows: vec![
                TickRow {
                    tick: 0,
                    truth: Pose::default(),
                    commanded: WheelSpeeds::ZERO,
                    applied: WheelSpeeds::ZERO,
                    delivered: vec![],
                    filters: vec![sample(3.0, 4.0)],
                },
                TickRow {
                    tick: 1,
                    truth: Pose::default(),
                    commanded: WheelSpeeds::ZERO,
                    applied: WheelSpeeds::ZERO,
                    delivered: vec![],
                    filters: vec![sample(0.0, 0.0)],
                },
            ],
            fusion: vec![FusionCounts::default()],
        }
    }

    #[test]
    fn deviation_series_axes() {
        let rec = small_record();
        let norm = deviation_series(&rec, FilterKind::PoEkf, Axis::PositionNorm).unwrap();
        assert_eq!(norm, vec![(0, 5.0), (1, 0.0)]);
        assert!(matches!(
            deviation_series(&rec, FilterKind::Ekf, Axis::X),
            Err(ScenarioError::FilterNotInRun { .. })
        ));
        assert!("z".parse::<Axis>().is_err());
    }

    #[test]
    fn summary_with_warmup() {
        let rec = small_record();
        let all = summarize(&rec, 0, DelaySummary::default());
        let f = all.filter(FilterKind::PoEkf).unwrap();
        assert!((f.rmse_position - (25.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert_eq!(f.max_abs[0], 3.0);
        let late = summarize(&rec, 1, DelaySummary::default());
        assert_eq!(late.filter(FilterKind::PoEkf).unwrap().rmse_position, 0.0);
    }

    #[test]
    fn csv_leaves_missing_measurements_empty() {
        let rec = small_record();
        let mut buf = Vec::new();
        write_run_csv(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with(
            "tick,truth_x,truth_y,truth_theta,cmd_wl,cmd_wr,applied_wl,applied_wr,meas_x"
        ));
        assert!(header.ends_with("po_ekf_dev_theta"));
        assert_eq!(lines.next().unwrap(), "0,0,0,0,0,0,0,0,,,,,0,0,0,0,3,4,0");
    }
}
