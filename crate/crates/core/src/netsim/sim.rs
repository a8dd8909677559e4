//! Seeded discrete-event driver for the protocol state machines.
//!
//! Virtual time advances only through the event queue, so a run is a pure
//! function of the node configurations and the transport seed. Messages are
//! carried as encoded frames and decoded on delivery, exactly as on a socket.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::device::{Device, DevicePhase};
use super::gateway::{Gateway, GatewayConfig, GatewayPhase};
use super::message::{decode, encode, DeviceId, Message};
use super::{millis_to_nanos, Action, EventKind, Nanos, Node, Observation, SessionLog, TimerKind, TransportProfile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    Deliver { to: Node, frame: Vec<u8> },
    Timer { node: Node, kind: TimerKind },
    Start(DeviceId),
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    at: Nanos,
    seq: u64,
    event: Event,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// A full gateway-plus-devices session on a simulated network.
pub struct Simulation {
    now: Nanos,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    gateway: Gateway,
    devices: BTreeMap<DeviceId, Device>,
    profile: TransportProfile,
    rng: ChaCha8Rng,
    log: SessionLog,
    observations: Vec<Observation>,
    capture: Option<Vec<Vec<u8>>>,
}

impl Simulation {
    pub fn new(c: f64, d: f64, gateway: GatewayConfig, profile: TransportProfile) -> Result<Self> {
        profile.validate()?;
        Ok(Simulation {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            gateway: Gateway::new(c, d, gateway)?,
            devices: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            profile,
            log: SessionLog::default(),
            observations: Vec::new(),
            capture: None,
        })
    }

    /// Keep a copy of every frame put on the wire.
    pub fn capture_frames(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        self.capture.as_deref().unwrap_or(&[])
    }

    /// Adds a device that registers at virtual time `at`.
    pub fn add_device(&mut self, device: Device, at: Nanos) -> Result<()> {
        let id = device.id();
        if self.devices.contains_key(&id) {
            return Err(Error::Contract(format!("device {id} added twice to the simulation")));
        }
        self.devices.insert(id, device);
        self.schedule(at, Event::Start(id));
        Ok(())
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn gateway_mut(&mut self) -> &mut Gateway {
        &mut self.gateway
    }

    pub fn device(&self, id: DeviceId) -> Option<&Device> {
        self.devices.get(&id)
    }

    pub fn device_mut(&mut self, id: DeviceId) -> Option<&mut Device> {
        self.devices.get_mut(&id)
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut SessionLog {
        &mut self.log
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn take_observations(&mut self) -> Vec<Observation> {
        std::mem::take(&mut self.observations)
    }

    /// Injects an operator message addressed to `to`, sent now over a
    /// zero-delay control channel.
    pub fn inject(&mut self, to: Node, msg: Message) {
        let frame = encode(&msg);
        self.schedule(self.now, Event::Deliver { to, frame });
    }

    /// Runs the withheld broadcast of a paused gateway.
    pub fn resume_gateway(&mut self) {
        let actions = self.gateway.resume();
        self.apply(Node::Gateway, actions);
    }

    /// Processes events up to and including virtual time `until`.
    pub fn run_until(&mut self, until: Nanos) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.at > until {
                break;
            }
            self.step();
        }
        self.now = self.now.max(until);
    }

    /// Runs until `stop` holds or virtual time passes `deadline`. Returns
    /// whether `stop` was reached.
    pub fn run_while(&mut self, deadline: Nanos, mut stop: impl FnMut(&Simulation) -> bool) -> bool {
        loop {
            if stop(self) {
                return true;
            }
            match self.queue.peek() {
                Some(Reverse(next)) if next.at <= deadline => self.step(),
                _ => return stop(self),
            }
        }
    }

    /// Runs until the gateway enters the data phase.
    pub fn run_until_converged(&mut self, deadline: Nanos) -> bool {
        self.run_while(deadline, |s| s.gateway.phase() == GatewayPhase::Streaming)
    }

    /// Runs until `round` rounds have been closed and stops between rounds,
    /// before the broadcast that opens round `round` leaves the gateway.
    pub fn run_rounds_until(&mut self, round: u64, deadline: Nanos) -> bool {
        if self.gateway.round() >= round && self.gateway.is_paused() {
            return true;
        }
        self.gateway.pause_before(round);
        self.run_while(deadline, |s| s.gateway.is_paused() && s.gateway.round() >= round)
    }

    /// True when some device gave up (rejected, aborted).
    pub fn any_device_failed(&self) -> bool {
        self.devices.values().any(|d| matches!(d.phase(), DevicePhase::Aborted | DevicePhase::Rejected))
    }

    fn schedule(&mut self, at: Nanos, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn step(&mut self) {
        let Some(Reverse(Scheduled { at, event, .. })) = self.queue.pop() else { return };
        self.now = at;
        match event {
            Event::Start(id) => {
                let actions = self.devices.get_mut(&id).map(Device::start).unwrap_or_default();
                self.apply(Node::Device(id), actions);
            }
            Event::Timer { node, kind } => {
                let actions = match node {
                    Node::Gateway => self.gateway.on_timer(at, kind),
                    Node::Device(id) => match self.devices.get_mut(&id) {
                        Some(d) => d.on_timer(at, kind),
                        None => Vec::new(),
                    },
                };
                self.apply(node, actions);
            }
            Event::Deliver { to, frame } => {
                let msg = match decode(&frame) {
                    Ok(m) => m,
                    Err(e) => {
                        self.log.push(at, to, EventKind::Unexpected { detail: e.to_string() });
                        return;
                    }
                };
                let actions = match to {
                    Node::Gateway => self.gateway.handle(at, msg),
                    Node::Device(id) => match self.devices.get_mut(&id) {
                        Some(d) => d.handle(at, msg),
                        None => Vec::new(),
                    },
                };
                self.apply(to, actions);
            }
        }
    }

    /// Delay for one message on the link that touches `device`.
    fn sample_delay(&mut self, device: DeviceId) -> Nanos {
        let base = self.profile.link_delay_ms(device);
        let j = self.profile.jitter_ms;
        let ms = if j > 0.0 { base + self.rng.random_range(-j..=j) } else { base };
        millis_to_nanos(ms.max(0.0))
    }

    fn dropped(&mut self) -> bool {
        self.profile.drop_rate > 0.0 && self.rng.random::<f64>() < self.profile.drop_rate
    }

    fn apply(&mut self, from: Node, actions: Vec<Action>) {
        let mut last_send_delay: Nanos = 0;
        for action in actions {
            match action {
                Action::Send { to, msg } => {
                    let device = match (from, to) {
                        (Node::Device(d), _) | (_, Node::Device(d)) => d,
                        _ => continue,
                    };
                    let delay = self.sample_delay(device);
                    last_send_delay = delay;
                    let frame = encode(&msg);
                    if let Some(cap) = &mut self.capture {
                        cap.push(frame.clone());
                    }
                    if self.dropped() {
                        self.log.push(self.now, from, EventKind::Dropped { kind: msg.kind().to_string() });
                        continue;
                    }
                    self.schedule(self.now + delay, Event::Deliver { to, frame });
                }
                Action::SetTimer { after, kind } => self.schedule(self.now + after, Event::Timer { node: from, kind }),
                Action::SetTimerAfterSend { after, kind } => {
                    self.schedule(self.now + last_send_delay + after, Event::Timer { node: from, kind })
                }
                Action::Observe(obs) => self.observations.push(obs),
                Action::Log(event) => self.log.push(self.now, from, event),
            }
        }
    }
}
