use super::{
    millis_to_nanos, nanos_to_secs, secs_to_nanos, Action, DeviceId, EventKind, Message, Nanos, Node, RoundStatus,
    TimerKind,
};
use crate::optim::{dual_u_update, local_x_update, SolverConfig};
use crate::utility::UtilityFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevicePhase {
    Idle,
    Registered,
    Optimizing,
    Streaming,
    Rejected,
    Aborted,
}

/// Re-send policy for unanswered reports on a lossy link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub timeout_ms: f64,
    pub max_attempts: u32,
}

/// Device-private optimisation state, for checkpoint and restore.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceSnapshot {
    pub x: f64,
    pub u: f64,
    pub z: f64,
}

/// One edge device. Its utility never leaves this struct: the only
/// optimisation value it sends is `v = x + u`.
#[derive(Debug, Clone)]
pub struct Device {
    id: DeviceId,
    utility: UtilityFunction,
    a: f64,
    gamma: f64,
    cfg: SolverConfig,
    retry: Option<RetryPolicy>,
    x: f64,
    u: f64,
    z: f64,
    /// Next round this device will accept a broadcast for.
    expected: Option<u64>,
    attempts: u32,
    phase: DevicePhase,
    frequency_hz: f64,
    stream_epoch: u64,
}

impl Device {
    pub fn new(id: DeviceId, utility: UtilityFunction, a: f64, gamma: f64, cfg: SolverConfig) -> Self {
        Device {
            id,
            utility,
            a,
            gamma,
            cfg,
            retry: None,
            x: gamma,
            u: 0.0,
            z: gamma,
            expected: None,
            attempts: 0,
            phase: DevicePhase::Idle,
            frequency_hz: 0.0,
            stream_epoch: 0,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = Some(retry);
        self
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn phase(&self) -> DevicePhase {
        self.phase
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn size(&self) -> f64 {
        self.a
    }

    /// Frequency used in the data phase (the final consensus value).
    pub fn frequency_hz(&self) -> f64 {
        self.frequency_hz
    }

    /// Swaps the local utility; only meaningful between rounds.
    pub fn set_utility(&mut self, f: UtilityFunction) {
        self.utility = f;
    }

    pub fn utility(&self) -> UtilityFunction {
        self.utility
    }

    pub fn set_size(&mut self, a: f64) {
        self.a = a;
    }

    pub fn snapshot(&self) -> DeviceSnapshot {
        DeviceSnapshot { x: self.x, u: self.u, z: self.z }
    }

    pub fn restore(&mut self, s: DeviceSnapshot) {
        (self.x, self.u, self.z) = (s.x, s.u, s.z);
    }

    pub fn start(&mut self) -> Vec<Action> {
        self.phase = DevicePhase::Registered;
        vec![Action::Send {
            to: Node::Gateway,
            msg: Message::Register { device_id: self.id, a: self.a, gamma: self.gamma },
        }]
    }

    pub fn handle(&mut self, _now: Nanos, msg: Message) -> Vec<Action> {
        if matches!(self.phase, DevicePhase::Rejected | DevicePhase::Aborted) {
            return Vec::new();
        }
        match msg {
            Message::ZBroadcast { iteration, z, status } => self.on_z(iteration, z, status),
            Message::Rejected { reason, .. } => {
                self.phase = DevicePhase::Rejected;
                vec![Action::Log(EventKind::Aborted { device_id: self.id, reason })]
            }
            other => vec![Action::Log(EventKind::Unexpected { detail: format!("device got {}", other.kind()) })],
        }
    }

    pub fn on_timer(&mut self, now: Nanos, kind: TimerKind) -> Vec<Action> {
        match kind {
            TimerKind::DataTick(epoch) if epoch == self.stream_epoch && self.phase == DevicePhase::Streaming => {
                let interval = secs_to_nanos(1.0 / self.frequency_hz);
                vec![
                    Action::Send {
                        to: Node::Gateway,
                        msg: Message::DataPacket {
                            device_id: self.id,
                            timestamp: nanos_to_secs(now),
                            payload_size: self.a,
                        },
                    },
                    Action::SetTimerAfterSend { after: interval, kind: TimerKind::DataTick(epoch) },
                ]
            }
            TimerKind::Retry(r) if self.phase == DevicePhase::Optimizing && self.expected == Some(r + 1) => {
                let Some(policy) = self.retry else { return Vec::new() };
                self.attempts += 1;
                if self.attempts > policy.max_attempts {
                    self.phase = DevicePhase::Aborted;
                    return vec![Action::Log(EventKind::Aborted {
                        device_id: self.id,
                        reason: format!("no answer for round {r} after {} attempts", policy.max_attempts),
                    })];
                }
                vec![
                    Action::Log(EventKind::Retry { device_id: self.id, iteration: r, attempt: self.attempts }),
                    Action::Send {
                        to: Node::Gateway,
                        msg: Message::VUpdate { device_id: self.id, iteration: r, v: self.x + self.u },
                    },
                    Action::SetTimer { after: millis_to_nanos(policy.timeout_ms), kind: TimerKind::Retry(r) },
                ]
            }
            _ => Vec::new(),
        }
    }

    fn on_z(&mut self, iteration: u64, z: f64, status: RoundStatus) -> Vec<Action> {
        if self.expected.is_some_and(|e| iteration < e) {
            return Vec::new();
        }
        self.z = z;
        if status != RoundStatus::Resume {
            self.u = dual_u_update(self.u, self.x, z);
        }
        if status == RoundStatus::Final {
            self.phase = DevicePhase::Streaming;
            self.frequency_hz = z;
            self.stream_epoch += 1;
            // nobody reports for the final round; a later resume reuses its number
            self.expected = Some(iteration);
            return vec![
                Action::Log(EventKind::DataPhaseStarted { device_id: self.id, frequency_hz: z }),
                Action::SetTimer { after: 0, kind: TimerKind::DataTick(self.stream_epoch) },
            ];
        }
        self.phase = DevicePhase::Optimizing;
        self.x = match local_x_update(&self.utility, self.z, self.u, &self.cfg) {
            Ok(x) => x,
            Err(e) => {
                self.phase = DevicePhase::Aborted;
                return vec![Action::Log(EventKind::Aborted { device_id: self.id, reason: e.to_string() })];
            }
        };
        self.expected = Some(iteration + 1);
        self.attempts = 0;
        let mut actions = vec![Action::Send {
            to: Node::Gateway,
            msg: Message::VUpdate { device_id: self.id, iteration, v: self.x + self.u },
        }];
        if let Some(p) = self.retry {
            actions.push(Action::SetTimer { after: millis_to_nanos(p.timeout_ms), kind: TimerKind::Retry(iteration) });
        }
        actions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::presets;

    fn device() -> Device {
        Device::new(2, presets::allocation_set()[1], 3.0, 1.0, SolverConfig::default())
    }

    #[test]
    fn registers_without_revealing_the_utility() {
        let mut d = device();
        let actions = d.start();
        assert_eq!(
            actions,
            vec![Action::Send { to: Node::Gateway, msg: Message::Register { device_id: 2, a: 3.0, gamma: 1.0 } }]
        );
    }

    #[test]
    fn first_broadcast_produces_v() {
        let mut d = device();
        d.start();
        let actions = d.handle(0, Message::ZBroadcast { iteration: 0, z: 1.0, status: RoundStatus::Continue });
        // u stays 0 because x0 = z0 = gamma; x solves -2(x-4) = x - 1
        match &actions[0] {
            Action::Send { msg: Message::VUpdate { iteration: 0, v, .. }, .. } => assert!((v - 3.0).abs() < 1e-8),
            other => panic!("unexpected {other:?}"),
        }
        // duplicate broadcast for an old round is ignored
        assert!(d.handle(0, Message::ZBroadcast { iteration: 0, z: 1.0, status: RoundStatus::Continue }).is_empty());
    }

    #[test]
    fn final_broadcast_starts_streaming_at_consensus() {
        let mut d = device();
        d.start();
        d.handle(0, Message::ZBroadcast { iteration: 0, z: 1.0, status: RoundStatus::Continue });
        let actions = d.handle(0, Message::ZBroadcast { iteration: 1, z: 4.0, status: RoundStatus::Final });
        assert_eq!(d.phase(), DevicePhase::Streaming);
        assert!(actions.contains(&Action::SetTimer { after: 0, kind: TimerKind::DataTick(1) }));
        let tick = d.on_timer(1_000, TimerKind::DataTick(1));
        assert!(tick.contains(&Action::SetTimerAfterSend { after: 250_000_000, kind: TimerKind::DataTick(1) }));
        // stale epoch
        assert!(d.on_timer(1_000, TimerKind::DataTick(0)).is_empty());
    }

    #[test]
    fn retry_budget_exhaustion_aborts() {
        let mut d = device().with_retry(RetryPolicy { timeout_ms: 10.0, max_attempts: 2 });
        d.start();
        d.handle(0, Message::ZBroadcast { iteration: 0, z: 1.0, status: RoundStatus::Continue });
        assert_eq!(d.on_timer(1, TimerKind::Retry(0)).len(), 3);
        assert_eq!(d.on_timer(2, TimerKind::Retry(0)).len(), 3);
        d.on_timer(3, TimerKind::Retry(0));
        assert_eq!(d.phase(), DevicePhase::Aborted);
    }

    #[test]
    fn pole_on_axis_aborts_instead_of_panicking() {
        let mut d = device();
        d.set_utility(UtilityFunction::new(crate::utility::UtilityKind::Reciprocal));
        d.start();
        d.handle(0, Message::ZBroadcast { iteration: 0, z: 1.0, status: RoundStatus::Continue });
        assert_eq!(d.phase(), DevicePhase::Aborted);
    }
}
