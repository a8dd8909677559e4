use serde::{Deserialize, Serialize};

use super::{
    millis_to_nanos, nanos_to_secs, Action, ArrivalWindow, BudgetDelta, DeviceId, EventKind, FrequencyEstimate,
    Message, Nanos, Node, Observation, RoundStatus, TimerKind, DEFAULT_ESTIMATION_WINDOW,
};
use crate::budget::ResourceBudget;
use crate::error::{Error, Result};
use crate::optim::{project_onto_feasible, SolverConfig};

/// What the barrier does when a round times out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalePolicy {
    /// Log a stall and keep waiting for the missing reports.
    Wait,
    /// Close the round with each missing device's previous report.
    ProceedWithStale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub solver: SolverConfig,
    /// Registrations to wait for before the first round.
    pub expected_devices: usize,
    /// Consecutive rounds inside tolerance before the final broadcast;
    /// `None` keeps iterating forever (campaign mode).
    pub handshake_rounds: Option<usize>,
    /// Barrier timeout in milliseconds of virtual time.
    pub round_timeout_ms: f64,
    pub stale_policy: StalePolicy,
    pub estimation_window: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            solver: SolverConfig::default(),
            expected_devices: 1,
            handshake_rounds: Some(10),
            round_timeout_ms: 50.0,
            stale_policy: StalePolicy::Wait,
            estimation_window: DEFAULT_ESTIMATION_WINDOW,
        }
    }
}

impl GatewayConfig {
    /// Barrier timeout of 50 worst-case link delays, but never below one
    /// millisecond so that a zero-delay network does not time out on events
    /// that happen at the same virtual instant.
    pub fn default_round_timeout_ms(max_delay_ms: f64) -> f64 {
        (50.0 * max_delay_ms).max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.expected_devices == 0 {
            return Err(Error::InvalidConfig("expected_devices must be at least 1".into()));
        }
        if !(self.round_timeout_ms > 0.0 && self.round_timeout_ms.is_finite()) {
            return Err(Error::InvalidConfig("round_timeout_ms must be positive".into()));
        }
        if self.estimation_window < 2 {
            return Err(Error::InvalidConfig("estimation_window must be at least 2".into()));
        }
        if self.handshake_rounds == Some(0) {
            return Err(Error::InvalidConfig("handshake_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Member {
    id: DeviceId,
    a: f64,
    gamma: f64,
    z: f64,
    /// Scaled dual reconstructed as `v - z`; exact, because the device's own
    /// update is `u + x - z = v - z`.
    u: f64,
    last_v: Option<f64>,
    pending: Option<f64>,
    arrivals: ArrivalWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayPhase {
    Registering,
    Optimizing,
    Streaming,
}

/// Optimisation state of the gateway, for checkpoint and restore.
#[derive(Debug, Clone, PartialEq)]
pub struct GatewaySnapshot {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub last_v: Vec<Option<f64>>,
}

/// The gateway: registration, the per-round barrier and projection,
/// convergence handshake and data-phase frequency estimation.
#[derive(Debug, Clone)]
pub struct Gateway {
    cfg: GatewayConfig,
    c: f64,
    d: f64,
    members: Vec<Member>,
    joining: Vec<Member>,
    budget: Option<ResourceBudget>,
    phase: GatewayPhase,
    round: u64,
    converged_rounds: usize,
    pause_at: Option<u64>,
    paused: bool,
}

impl Gateway {
    pub fn new(c: f64, d: f64, cfg: GatewayConfig) -> Result<Self> {
        cfg.validate()?;
        if !(c > 0.0 && d > 0.0 && c.is_finite() && d.is_finite()) {
            return Err(Error::InfeasibleBudget(format!("c = {c} and d = {d} must be positive")));
        }
        Ok(Gateway {
            cfg,
            c,
            d,
            members: Vec::new(),
            joining: Vec::new(),
            budget: None,
            phase: GatewayPhase::Registering,
            round: 0,
            converged_rounds: 0,
            pause_at: None,
            paused: false,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn phase(&self) -> GatewayPhase {
        self.phase
    }

    /// Index of the round currently being collected.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn budget(&self) -> Option<&ResourceBudget> {
        self.budget.as_ref()
    }

    pub fn device_ids(&self) -> Vec<DeviceId> {
        self.members.iter().map(|m| m.id).collect()
    }

    pub fn z(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.z).collect()
    }

    pub fn z_of(&self, id: DeviceId) -> Option<f64> {
        self.members.iter().find(|m| m.id == id).map(|m| m.z)
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Withhold the broadcast that would open round `round`, handing control
    /// back to the caller between rounds.
    pub fn pause_before(&mut self, round: u64) {
        self.pause_at = Some(round);
    }

    pub fn snapshot(&self) -> GatewaySnapshot {
        GatewaySnapshot {
            z: self.members.iter().map(|m| m.z).collect(),
            u: self.members.iter().map(|m| m.u).collect(),
            last_v: self.members.iter().map(|m| m.last_v).collect(),
        }
    }

    pub fn restore(&mut self, snap: &GatewaySnapshot) -> Result<()> {
        if snap.z.len() != self.members.len() {
            return Err(Error::Contract("snapshot taken with a different device set".into()));
        }
        for (k, m) in self.members.iter_mut().enumerate() {
            m.z = snap.z[k];
            m.u = snap.u[k];
            m.last_v = snap.last_v[k];
        }
        self.converged_rounds = 0;
        Ok(())
    }

    /// Replaces the budget, keeping device order. Used by systemic
    /// reconfiguration and by size changes reported out of band.
    pub fn apply_delta(&mut self, delta: &BudgetDelta) -> Result<()> {
        let c = delta.c.unwrap_or(self.c);
        let d = delta.d.unwrap_or(self.d);
        let mut a: Vec<f64> = self.members.iter().map(|m| m.a).collect();
        for &(id, size) in &delta.sizes {
            let k = self
                .members
                .iter()
                .position(|m| m.id == id)
                .ok_or_else(|| Error::Contract(format!("unknown device {id} in reconfiguration")))?;
            a[k] = size;
        }
        if self.members.is_empty() {
            (self.c, self.d) = (c, d);
            return Ok(());
        }
        let gamma = self.members.iter().map(|m| m.gamma).collect();
        let budget = ResourceBudget::new(c, d, a.clone(), gamma)?;
        for (m, ai) in self.members.iter_mut().zip(a) {
            m.a = ai;
        }
        (self.c, self.d) = (c, d);
        self.budget = Some(budget);
        self.converged_rounds = 0;
        Ok(())
    }

    pub fn handle(&mut self, now: Nanos, msg: Message) -> Vec<Action> {
        match msg {
            Message::Register { device_id, a, gamma } => self.on_register(device_id, a, gamma),
            Message::VUpdate { device_id, iteration, v } => self.on_v(now, device_id, iteration, v),
            Message::DataPacket { device_id, .. } => {
                match self.members.iter_mut().find(|m| m.id == device_id) {
                    Some(m) => m.arrivals.push(nanos_to_secs(now)),
                    None => {
                        return vec![Action::Log(EventKind::Unexpected {
                            detail: format!("data from unknown device {device_id}"),
                        })]
                    }
                }
                Vec::new()
            }
            Message::Reconfigure { delta } => self.on_reconfigure(now, delta),
            other => vec![Action::Log(EventKind::Unexpected { detail: format!("gateway got {}", other.kind()) })],
        }
    }

    pub fn on_timer(&mut self, now: Nanos, kind: TimerKind) -> Vec<Action> {
        let TimerKind::RoundTimeout(r) = kind else {
            return Vec::new();
        };
        if r != self.round || self.phase != GatewayPhase::Optimizing || self.paused {
            return Vec::new();
        }
        let missing: Vec<DeviceId> = self.members.iter().filter(|m| m.pending.is_none()).map(|m| m.id).collect();
        if missing.is_empty() {
            return Vec::new();
        }
        match self.cfg.stale_policy {
            StalePolicy::Wait => vec![
                Action::Log(EventKind::Stall { iteration: r, missing }),
                Action::SetTimer { after: self.timeout(), kind: TimerKind::RoundTimeout(r) },
            ],
            StalePolicy::ProceedWithStale => {
                let mut actions = vec![Action::Log(EventKind::StaleRound { iteration: r, reused: missing })];
                actions.extend(self.close_round(now));
                actions
            }
        }
    }

    /// Emits the broadcast withheld by [`Gateway::pause_before`].
    pub fn resume(&mut self) -> Vec<Action> {
        if !self.paused {
            return Vec::new();
        }
        self.paused = false;
        self.pause_at = None;
        self.broadcast(RoundStatus::Continue)
    }

    /// Current estimates for every device with at least two arrivals.
    pub fn estimates(&self) -> Vec<FrequencyEstimate> {
        self.members
            .iter()
            .filter_map(|m| {
                let est = m.arrivals.estimate()?;
                Some(FrequencyEstimate {
                    device_id: m.id,
                    window_packets: m.arrivals.len(),
                    estimated_hz: est,
                    delay_ms: Some(1e3 * (1.0 / est - 1.0 / m.z)),
                })
            })
            .collect()
    }

    fn timeout(&self) -> Nanos {
        millis_to_nanos(self.cfg.round_timeout_ms)
    }

    fn new_member(&self, id: DeviceId, a: f64, gamma: f64) -> Member {
        Member {
            id,
            a,
            gamma,
            z: gamma,
            u: 0.0,
            last_v: None,
            pending: None,
            arrivals: ArrivalWindow::new(self.cfg.estimation_window),
        }
    }

    fn reject(&self, id: DeviceId, reason: String) -> Vec<Action> {
        vec![
            Action::Log(EventKind::RegistrationRejected { device_id: id, reason: reason.clone() }),
            Action::Send { to: Node::Device(id), msg: Message::Rejected { device_id: id, reason } },
        ]
    }

    fn trial_budget(&self, extra: &[&Member]) -> Result<ResourceBudget> {
        let all = self.members.iter().chain(self.joining.iter()).chain(extra.iter().copied());
        let (a, gamma): (Vec<f64>, Vec<f64>) = all.map(|m| (m.a, m.gamma)).unzip();
        ResourceBudget::new(self.c, self.d, a, gamma)
    }

    fn on_register(&mut self, id: DeviceId, a: f64, gamma: f64) -> Vec<Action> {
        if self.members.iter().chain(&self.joining).any(|m| m.id == id) {
            return self.reject(id, format!("device id {id} already registered"));
        }
        let member = self.new_member(id, a, gamma);
        if let Err(e) = self.trial_budget(&[&member]) {
            return self.reject(id, e.to_string());
        }
        let mut actions = vec![Action::Log(EventKind::Registered { device_id: id })];
        match self.phase {
            GatewayPhase::Registering => {
                self.members.push(member);
                if self.members.len() >= self.cfg.expected_devices {
                    self.budget = Some(self.trial_budget(&[]).expect("checked on registration"));
                    self.phase = GatewayPhase::Optimizing;
                    actions.extend(self.broadcast(RoundStatus::Continue));
                }
            }
            GatewayPhase::Optimizing => self.joining.push(member),
            GatewayPhase::Streaming => {
                self.joining.push(member);
                actions.extend(self.admit_joining());
                actions.extend(self.restart());
            }
        }
        actions
    }

    fn admit_joining(&mut self) -> Vec<Action> {
        if self.joining.is_empty() {
            return Vec::new();
        }
        let joined: Vec<Member> = std::mem::take(&mut self.joining);
        let mut actions = Vec::new();
        for m in joined {
            actions.push(Action::Log(EventKind::Joined { device_id: m.id, iteration: self.round }));
            self.members.push(m);
        }
        self.budget = Some(self.trial_budget(&[]).expect("checked on registration"));
        self.converged_rounds = 0;
        actions
    }

    /// Leaves the data phase and re-opens optimisation from the current state.
    fn restart(&mut self) -> Vec<Action> {
        self.phase = GatewayPhase::Optimizing;
        self.converged_rounds = 0;
        for m in &mut self.members {
            m.arrivals.clear();
        }
        self.broadcast(RoundStatus::Resume)
    }

    fn on_reconfigure(&mut self, _now: Nanos, delta: BudgetDelta) -> Vec<Action> {
        if let Err(e) = self.apply_delta(&delta) {
            return vec![Action::Log(EventKind::ReconfigureRejected { reason: e.to_string() })];
        }
        let mut actions = vec![Action::Log(EventKind::Reconfigured { iteration: self.round })];
        if self.phase == GatewayPhase::Streaming {
            actions.extend(self.restart());
        }
        actions
    }

    fn on_v(&mut self, now: Nanos, id: DeviceId, iteration: u64, v: f64) -> Vec<Action> {
        let Some(k) = self.members.iter().position(|m| m.id == id) else {
            return vec![Action::Log(EventKind::Unexpected { detail: format!("report from unknown device {id}") })];
        };
        if self.phase != GatewayPhase::Optimizing {
            return Vec::new();
        }
        if iteration < self.round {
            if self.paused {
                return Vec::new();
            }
            // The device is still waiting on a broadcast it never received.
            let m = &self.members[k];
            let msg = Message::ZBroadcast { iteration: self.round, z: m.z, status: RoundStatus::Continue };
            return vec![Action::Send { to: Node::Device(id), msg }];
        }
        if iteration > self.round {
            return vec![Action::Log(EventKind::Unexpected {
                detail: format!("device {id} reported round {iteration} during round {}", self.round),
            })];
        }
        if self.members[k].pending.is_some() {
            return Vec::new();
        }
        self.members[k].pending = Some(v);
        if self.members.iter().all(|m| m.pending.is_some()) {
            self.close_round(now)
        } else {
            Vec::new()
        }
    }

    fn close_round(&mut self, _now: Nanos) -> Vec<Action> {
        let budget = self.budget.clone().expect("budget exists while optimising");
        let v: Vec<f64> = self.members.iter().map(|m| m.pending.or(m.last_v).unwrap_or(m.z + m.u)).collect();
        let z_new = match project_onto_feasible(&v, &budget, &self.cfg.solver) {
            Ok(z) => z,
            Err(e) => {
                return vec![Action::Log(EventKind::Unexpected { detail: format!("projection failed: {e}") })];
            }
        };
        let (mut primal, mut dual) = (0.0, 0.0);
        for (k, m) in self.members.iter_mut().enumerate() {
            let u_new = v[k] - z_new[k];
            primal += (u_new - m.u).powi(2);
            dual += (z_new[k] - m.z).powi(2);
            m.u = u_new;
            m.z = z_new[k];
            m.last_v = Some(v[k]);
            m.pending = None;
        }
        let primal = primal.sqrt();
        let dual = self.cfg.solver.rho * dual.sqrt();
        let iteration = self.round;
        let mut actions = vec![
            Action::Observe(Observation { iteration, z: z_new, v, primal, dual }),
            Action::Log(EventKind::RoundClosed { iteration, primal, dual }),
        ];
        self.round += 1;

        let joined = !self.joining.is_empty();
        actions.extend(self.admit_joining());
        let within = primal <= self.cfg.solver.primal_tol && dual <= self.cfg.solver.dual_tol;
        self.converged_rounds = if within && !joined { self.converged_rounds + 1 } else { 0 };

        if let Some(k) = self.cfg.handshake_rounds {
            if self.converged_rounds >= k {
                self.phase = GatewayPhase::Streaming;
                self.converged_rounds = 0;
                for m in &mut self.members {
                    m.arrivals.clear();
                }
                actions.push(Action::Log(EventKind::Converged { iteration }));
                actions.extend(self.broadcast(RoundStatus::Final));
                return actions;
            }
        }
        if self.pause_at == Some(self.round) {
            self.paused = true;
            return actions;
        }
        actions.extend(self.broadcast(RoundStatus::Continue));
        actions
    }

    /// Sends every member its own consensus value. Members that have never
    /// reported (fresh joiners) always get a plain start-of-round broadcast.
    fn broadcast(&mut self, status: RoundStatus) -> Vec<Action> {
        let mut actions: Vec<Action> = self
            .members
            .iter()
            .map(|m| {
                let status = if m.last_v.is_none() && status == RoundStatus::Resume { RoundStatus::Continue } else { status };
                Action::Send {
                    to: Node::Device(m.id),
                    msg: Message::ZBroadcast { iteration: self.round, z: m.z, status },
                }
            })
            .collect();
        if status != RoundStatus::Final {
            actions.push(Action::SetTimer { after: self.timeout(), kind: TimerKind::RoundTimeout(self.round) });
        }
        actions
    }
}
