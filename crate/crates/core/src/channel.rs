//! Discrete-event model of a delaying network link.
//!
//! The one-way delay of a message sent at tick `k` is `base + load(k)`: a
//! constant routing/propagation part plus a random load-dependent part.
//! Delays are quantized up to whole ticks; a message becomes available at the
//! first tick at or after its physical arrival.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Uniform};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid delay model: {0}")]
    InvalidModel(String),
    #[error("unknown load distribution '{0}' (expected constant, exponential or uniform)")]
    UnknownDistribution(String),
    #[error("sample period must be finite and > 0, got {0}")]
    InvalidPeriod(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadDistribution {
    /// The load term always equals its mean.
    Constant,
    Exponential,
    /// Uniform on `[mean - width/2, mean + width/2]`.
    Uniform {
        width_ms: f64,
    },
}

impl LoadDistribution {
    pub fn name(&self) -> &'static str {
        match self {
            LoadDistribution::Constant => "constant",
            LoadDistribution::Exponential => "exponential",
            LoadDistribution::Uniform { .. } => "uniform",
        }
    }
}

impl fmt::Display for LoadDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoadDistribution {
    type Err = ChannelError;

    /// Parses `constant`, `exponential` or `uniform`; a uniform load parsed
    /// this way has zero width until one is set.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" | "const" => Ok(LoadDistribution::Constant),
            "exponential" | "exp" => Ok(LoadDistribution::Exponential),
            "uniform" => Ok(LoadDistribution::Uniform { width_ms: 0.0 }),
            _ => Err(ChannelError::UnknownDistribution(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModel {
    pub base_ms: f64,
    pub load_mean_ms: f64,
    pub load: LoadDistribution,
    pub seed: u64,
}

impl DelayModel {
    pub fn new(
        base_ms: f64,
        load_mean_ms: f64,
        load: LoadDistribution,
        seed: u64,
    ) -> Result<Self, ChannelError> {
        let model = Self {
            base_ms,
            load_mean_ms,
            load,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    /// No delay at all.
    pub fn zero() -> Self {
        Self {
            base_ms: 0.0,
            load_mean_ms: 0.0,
            load: LoadDistribution::Constant,
            seed: 0,
        }
    }

    /// A constant delay of exactly `steps` ticks at the given sample period.
    pub fn fixed_steps(steps: u64, sample_period: f64) -> Self {
        Self {
            base_ms: steps as f64 * 1000.0 * sample_period,
            load_mean_ms: 0.0,
            load: LoadDistribution::Constant,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.base_ms.is_finite() && self.base_ms >= 0.0) {
            return Err(ChannelError::InvalidModel(format!(
                "base_ms = {}",
                self.base_ms
            )));
        }
        if !(self.load_mean_ms.is_finite() && self.load_mean_ms >= 0.0) {
            return Err(ChannelError::InvalidModel(format!(
                "load_mean_ms = {}",
                self.load_mean_ms
            )));
        }
        if let LoadDistribution::Uniform { width_ms } = self.load {
            if !(width_ms.is_finite() && width_ms >= 0.0 && width_ms <= 2.0 * self.load_mean_ms) {
                return Err(ChannelError::InvalidModel(format!(
                    "uniform width {width_ms} must lie in [0, 2 * load_mean_ms]"
                )));
            }
        }
        Ok(())
    }

    pub fn mean_ms(&self) -> f64 {
        self.base_ms + self.load_mean_ms
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Delay in milliseconds for a message sent at `tick`. Depends only on
/// `(model, tick)`.
pub fn sample_delay_ms(model: &DelayModel, tick: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(tick);
    let mean = model.load_mean_ms;
    let load = match model.load {
        LoadDistribution::Constant => mean,
        LoadDistribution::Exponential if mean > 0.0 => match Exp::new(1.0 / mean) {
            Ok(exp) => exp.sample(&mut rng),
            Err(_) => mean,
        },
        LoadDistribution::Exponential => 0.0,
        LoadDistribution::Uniform { width_ms } if width_ms > 0.0 => {
            match Uniform::new_inclusive(mean - width_ms / 2.0, mean + width_ms / 2.0) {
                Ok(u) => u.sample(&mut rng),
                Err(_) => mean,
            }
        }
        LoadDistribution::Uniform { .. } => mean,
    };
    model.base_ms + load
}

/// Whole ticks until a message delayed by `delay_ms` can be used.
pub fn quantize_delay(delay_ms: f64, sample_period: f64) -> u64 {
    // Guard against 300 / (1000 * 0.1) landing a hair above 3.
    let ticks = delay_ms / (1000.0 * sample_period);
    let ticks = (ticks - 1e-9).ceil();
    if ticks <= 0.0 {
        0
    } else {
        ticks as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestampedMessage<P> {
    pub payload: P,
    pub origin_step: u64,
    pub delivery_step: u64,
}

impl<P> TimestampedMessage<P> {
    pub fn delay_steps(&self) -> u64 {
        self.delivery_step - self.origin_step
    }
}

/// Running delay statistics of a channel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DelayStats {
    pub sent: usize,
    pub delivered: usize,
    pub total_delay_ms: f64,
    pub total_delay_steps: u64,
}

impl DelayStats {
    pub fn mean_delay_ms(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.total_delay_ms / self.sent as f64
        }
    }

    pub fn mean_delay_steps(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.total_delay_steps as f64 / self.sent as f64
        }
    }
}

/// In-flight messages of one link, ordered by delivery tick.
#[derive(Debug, Clone)]
pub struct ChannelState<P> {
    model: DelayModel,
    sample_period: f64,
    in_flight: BTreeMap<(u64, u64, u64), TimestampedMessage<P>>,
    seq: u64,
    stats: DelayStats,
}

impl<P> ChannelState<P> {
    pub fn new(model: DelayModel, sample_period: f64) -> Result<Self, ChannelError> {
        model.validate()?;
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(ChannelError::InvalidPeriod(sample_period));
        }
        Ok(Self {
            model,
            sample_period,
            in_flight: BTreeMap::new(),
            seq: 0,
            stats: DelayStats::default(),
        })
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    pub fn stats(&self) -> DelayStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Queues `payload` sent at `tick`; returns its delivery tick.
    pub fn send(&mut self, payload: P, tick: u64) -> u64 {
        let delay_ms = sample_delay_ms(&self.model, tick);
        let steps = quantize_delay(delay_ms, self.sample_period);
        let delivery_step = tick + steps;
        self.stats.sent += 1;
        self.stats.total_delay_ms += delay_ms;
        self.stats.total_delay_steps += steps;
        self.in_flight.insert(
            (delivery_step, tick, self.seq),
            TimestampedMessage {
                payload,
                origin_step: tick,
                delivery_step,
            },
        );
        self.seq += 1;
        delivery_step
    }

    /// Removes and returns every message deliverable at `tick`, ordered by
    /// delivery tick then origin tick.
    pub fn poll(&mut self, tick: u64) -> Vec<TimestampedMessage<P>> {
        let ready = match tick.checked_add(1) {
            Some(next) => {
                let later = self.in_flight.split_off(&(next, 0, 0));
                std::mem::replace(&mut self.in_flight, later)
            }
            None => std::mem::take(&mut self.in_flight),
        };
        self.stats.delivered += ready.len();
        ready.into_values().collect()
    }
}

/// Writes `samples` delays as CSV rows `tick,delay_ms` and returns their mean.
pub fn write_delay_trace<W: Write>(model: &DelayModel, samples: u64, out: W) -> csv::Result<f64> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["tick", "delay_ms"])?;
    let mut sum = 0.0;
    for tick in 0..samples {
        let d = sample_delay_ms(model, tick);
        sum += d;
        wtr.write_record([tick.to_string(), crate::format::sig9(d)])?;
    }
    wtr.flush()?;
    Ok(if samples == 0 {
        0.0
    } else {
        sum / samples as f64
    })
}
