//! The gateway/device protocol that runs decentralised ADMM over a network.
//!
//! [`Gateway`] and [`Device`] are sans-IO state machines: they consume
//! messages and timer expiries and return [`Action`]s. Two drivers execute
//! them: [`sim::Simulation`], a seeded discrete-event simulator with
//! per-link delay and jitter, and [`socket`], which runs every node on its own
//! thread over TCP with a compressed clock.

mod device;
mod gateway;
pub mod message;
pub mod sim;
pub mod socket;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use device::{Device, DevicePhase, DeviceSnapshot, RetryPolicy};
pub use gateway::{Gateway, GatewayConfig, GatewayPhase, GatewaySnapshot, StalePolicy};
pub use message::{decode, encode, BudgetDelta, DeviceId, FrameDecoder, Message, RoundStatus};

/// Virtual time in nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_SEC: f64 = 1e9;

pub fn secs_to_nanos(s: f64) -> Nanos {
    (s * NANOS_PER_SEC).round().max(0.0) as Nanos
}

pub fn millis_to_nanos(ms: f64) -> Nanos {
    secs_to_nanos(ms / 1e3)
}

pub fn nanos_to_secs(t: Nanos) -> f64 {
    t as f64 / NANOS_PER_SEC
}

/// Addressable endpoint of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Gateway,
    Device(DeviceId),
}

/// Timer identities. Each node only ever sees its own timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    /// Gateway barrier for the given round.
    RoundTimeout(u64),
    /// Device re-sends its report for the given round if still unanswered.
    Retry(u64),
    /// Device writes its next data packet; the payload is the streaming
    /// epoch, so ticks from an earlier data phase are ignored.
    DataTick(u64),
}

/// The gateway-visible signals of one closed round, as handed to detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub iteration: u64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
}

/// Side effects requested by a state machine.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: Node, msg: Message },
    /// Timer relative to now.
    SetTimer { after: Nanos, kind: TimerKind },
    /// Timer that starts counting once the preceding send has completed
    /// (a blocking write followed by a sleep).
    SetTimerAfterSend { after: Nanos, kind: TimerKind },
    Observe(Observation),
    Log(EventKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Registered { device_id: DeviceId },
    RegistrationRejected { device_id: DeviceId, reason: String },
    Joined { device_id: DeviceId, iteration: u64 },
    RoundClosed { iteration: u64, primal: f64, dual: f64 },
    Stall { iteration: u64, missing: Vec<DeviceId> },
    StaleRound { iteration: u64, reused: Vec<DeviceId> },
    Converged { iteration: u64 },
    Reconfigured { iteration: u64 },
    ReconfigureRejected { reason: String },
    DataPhaseStarted { device_id: DeviceId, frequency_hz: f64 },
    Retry { device_id: DeviceId, iteration: u64, attempt: u32 },
    Aborted { device_id: DeviceId, reason: String },
    Dropped { kind: String },
    Unexpected { detail: String },
    Control { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_ns: Nanos,
    pub node: Node,
    #[serde(flatten)]
    pub event: EventKind,
}

/// Ordered record of everything notable that happened in a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    pub entries: Vec<LogEntry>,
}

impl SessionLog {
    pub fn push(&mut self, time_ns: Nanos, node: Node, event: EventKind) {
        self.entries.push(LogEntry { time_ns, node, event });
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entry serialisation cannot fail"));
            s.push('\n');
        }
        s
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.event)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    Simulated,
    Socket,
}

/// Link behaviour shared by both transports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportProfile {
    pub mode: TransportMode,
    /// One-way delay in milliseconds.
    pub base_delay_ms: f64,
    /// Half-width of the uniform jitter added to every delay, milliseconds.
    pub jitter_ms: f64,
    /// Per-device overrides of `base_delay_ms`.
    pub device_delay_ms: Vec<(DeviceId, f64)>,
    /// Probability that any single message is lost.
    pub drop_rate: f64,
    pub seed: u64,
    /// Wall-clock speed-up of the socket transport.
    pub time_compression: f64,
}

impl Default for TransportProfile {
    fn default() -> Self {
        TransportProfile {
            mode: TransportMode::Simulated,
            base_delay_ms: 0.0,
            jitter_ms: 0.0,
            device_delay_ms: Vec::new(),
            drop_rate: 0.0,
            seed: 0,
            time_compression: 100.0,
        }
    }
}

impl TransportProfile {
    pub fn validate(&self) -> Result<()> {
        let delays_ok = self.base_delay_ms >= 0.0
            && self.jitter_ms >= 0.0
            && self.base_delay_ms.is_finite()
            && self.jitter_ms.is_finite()
            && self.device_delay_ms.iter().all(|(_, d)| *d >= 0.0 && d.is_finite());
        if !delays_ok {
            return Err(Error::InvalidConfig("delays and jitter must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidConfig(format!("drop_rate {} outside [0, 1)", self.drop_rate)));
        }
        if !(self.time_compression > 0.0 && self.time_compression.is_finite()) {
            return Err(Error::InvalidConfig("time_compression must be positive".into()));
        }
        Ok(())
    }

    /// Base one-way delay of a device's link, milliseconds.
    pub fn link_delay_ms(&self, device: DeviceId) -> f64 {
        self.device_delay_ms.iter().find(|(d, _)| *d == device).map_or(self.base_delay_ms, |(_, ms)| *ms)
    }

    /// Largest delay any message can experience, milliseconds.
    pub fn max_delay_ms(&self) -> f64 {
        self.device_delay_ms.iter().map(|(_, d)| *d).fold(self.base_delay_ms, f64::max) + self.jitter_ms
    }
}

/// Gateway-side estimate of a device's data-flow writing frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub device_id: DeviceId,
    pub window_packets: usize,
    pub estimated_hz: f64,
    /// `1000 * (1 / estimated - 1 / theoretical)`; `None` until a theoretical
    /// frequency is known.
    pub delay_ms: Option<f64>,
}

pub const DEFAULT_ESTIMATION_WINDOW: usize = 300;

/// `(n - 1) / (t_n - t_1)` over the trailing `window` arrival times (seconds).
pub fn estimate_dfwf(timestamps: &[f64], window: usize) -> Result<f64> {
    if timestamps.len() < 2 || window < 2 {
        return Err(Error::Contract("need at least two timestamps and a window of two".into()));
    }
    if let Some(k) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Contract(format!("timestamps not strictly increasing at index {}", k + 1)));
    }
    let n = window.min(timestamps.len());
    let tail = &timestamps[timestamps.len() - n..];
    Ok((n - 1) as f64 / (tail[n - 1] - tail[0]))
}

/// Bounded arrival-time window kept by the gateway for one device.
#[derive(Debug, Clone)]
pub(crate) struct ArrivalWindow {
    times: VecDeque<f64>,
    capacity: usize,
}

impl ArrivalWindow {
    pub(crate) fn new(capacity: usize) -> Self {
        ArrivalWindow { times: VecDeque::with_capacity(capacity), capacity }
    }

    pub(crate) fn push(&mut self, t: f64) {
        if self.times.back().is_some_and(|&last| t <= last) {
            return;
        }
        if self.times.len() == self.capacity {
            self.times.pop_front();
        }
        self.times.push_back(t);
    }

    pub(crate) fn clear(&mut self) {
        self.times.clear();
    }

    pub(crate) fn len(&self) -> usize {
        self.times.len()
    }

    pub(crate) fn estimate(&self) -> Option<f64> {
        let ts: Vec<f64> = self.times.iter().copied().collect();
        estimate_dfwf(&ts, self.capacity).ok()
    }
}
