//! TCP driver: the gateway and every device run on their own threads and
//! talk over loopback sockets using the same frames as the simulator.
//!
//! Virtual time is wall time multiplied by the profile's compression factor,
//! so a several-minute experiment finishes in seconds. Link delays are
//! emulated by a per-connection writer thread that holds each frame until its
//! delivery instant.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::device::Device;
use super::gateway::{Gateway, GatewayConfig};
use super::message::{encode, DeviceId, FrameDecoder, Message};
use super::{
    millis_to_nanos, Action, FrequencyEstimate, LogEntry, Nanos, Node, Observation, SessionLog, TimerKind,
    TransportProfile,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Clock {
    start: Instant,
    compression: f64,
}

impl Clock {
    fn now(&self) -> Nanos {
        (self.start.elapsed().as_nanos() as f64 * self.compression) as Nanos
    }

    fn wall(&self, virtual_ns: Nanos) -> Duration {
        Duration::from_nanos((virtual_ns as f64 / self.compression) as u64)
    }

    fn instant_of(&self, virtual_ns: Nanos) -> Instant {
        self.start + self.wall(virtual_ns)
    }
}

/// Pending timers of one node, ordered by deadline then insertion.
#[derive(Default)]
struct Timers {
    entries: Vec<(Nanos, u64, TimerKind)>,
    seq: u64,
}

impl Timers {
    fn add(&mut self, at: Nanos, kind: TimerKind) {
        self.seq += 1;
        self.entries.push((at, self.seq, kind));
    }

    fn next_deadline(&self) -> Option<Nanos> {
        self.entries.iter().map(|e| e.0).min()
    }

    fn pop_due(&mut self, now: Nanos) -> Option<TimerKind> {
        let (k, _) = self.entries.iter().enumerate().filter(|(_, e)| e.0 <= now).min_by_key(|(_, e)| (e.0, e.1))?;
        Some(self.entries.swap_remove(k).2)
    }
}

/// Sends frames after their emulated link delay.
struct DelayedWriter {
    tx: Sender<(Instant, Vec<u8>)>,
    handle: JoinHandle<()>,
}

impl DelayedWriter {
    fn spawn(mut stream: TcpStream) -> Self {
        let (tx, rx) = mpsc::channel::<(Instant, Vec<u8>)>();
        let handle = thread::spawn(move || {
            for (at, frame) in rx {
                let now = Instant::now();
                if at > now {
                    thread::sleep(at - now);
                }
                if stream.write_all(&frame).is_err() {
                    break;
                }
            }
            let _ = stream.shutdown(Shutdown::Write);
        });
        DelayedWriter { tx, handle }
    }

    fn send(&self, at: Instant, frame: Vec<u8>) {
        let _ = self.tx.send((at, frame));
    }

    fn close(self) {
        drop(self.tx);
        let _ = self.handle.join();
    }
}

enum Input {
    Conn(u64, TcpStream),
    Msg(u64, Message),
    Closed(u64),
}

fn spawn_reader(mut stream: TcpStream, conn: u64, tx: Sender<Input>) {
    thread::spawn(move || {
        let mut dec = FrameDecoder::default();
        let mut buf = [0u8; 4096];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    dec.extend(&buf[..n]);
                    loop {
                        match dec.next_message() {
                            Ok(Some(m)) => {
                                if tx.send(Input::Msg(conn, m)).is_err() {
                                    return;
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                log::warn!("dropping connection {conn}: {e}");
                                let _ = tx.send(Input::Closed(conn));
                                return;
                            }
                        }
                    }
                }
            }
        }
        let _ = tx.send(Input::Closed(conn));
    });
}

/// Link-delay sampler shared by gateway and devices.
struct Link {
    profile: TransportProfile,
    rng: ChaCha8Rng,
}

impl Link {
    fn delay(&mut self, device: DeviceId) -> Nanos {
        let base = self.profile.link_delay_ms(device);
        let j = self.profile.jitter_ms;
        let ms = if j > 0.0 { base + self.rng.random_range(-j..=j) } else { base };
        millis_to_nanos(ms.max(0.0))
    }
}

/// Everything the gateway saw during a socket session.
#[derive(Debug, Clone)]
pub struct SocketOutcome {
    pub log: SessionLog,
    pub observations: Vec<Observation>,
    pub estimates: Vec<FrequencyEstimate>,
    pub device_ids: Vec<DeviceId>,
    pub final_z: Vec<f64>,
    pub addr: SocketAddr,
}

/// Runs a session over loopback TCP for `duration` of virtual time.
/// Devices connect at their given virtual start offsets.
pub fn run_socket_session(
    c: f64,
    d: f64,
    gateway_cfg: GatewayConfig,
    profile: TransportProfile,
    devices: Vec<(Device, Nanos)>,
    duration: Nanos,
) -> Result<SocketOutcome> {
    profile.validate()?;
    let mut gateway = Gateway::new(c, d, gateway_cfg)?;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| Error::Transport(format!("bind: {e}")))?;
    let addr = listener.local_addr().map_err(|e| Error::Transport(e.to_string()))?;
    listener.set_nonblocking(true).map_err(|e| Error::Transport(e.to_string()))?;
    let clock = Clock { start: Instant::now(), compression: profile.time_compression };
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Input>();

    let accept = {
        let tx = tx.clone();
        let shutdown = shutdown.clone();
        thread::spawn(move || {
            let mut next_conn = 0u64;
            while !shutdown.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        let Ok(reader) = stream.try_clone() else { continue };
                        spawn_reader(reader, next_conn, tx.clone());
                        if tx.send(Input::Conn(next_conn, stream)).is_err() {
                            break;
                        }
                        next_conn += 1;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        break;
                    }
                }
            }
        })
    };

    let device_threads: Vec<JoinHandle<Result<()>>> = devices
        .into_iter()
        .map(|(device, start)| {
            let profile = profile.clone();
            let shutdown = shutdown.clone();
            thread::spawn(move || run_device(device, start, addr, clock, profile, shutdown))
        })
        .collect();

    let mut log = SessionLog::default();
    let mut observations = Vec::new();
    let mut writers: HashMap<u64, DelayedWriter> = HashMap::new();
    let mut routes: HashMap<DeviceId, u64> = HashMap::new();
    let mut timers = Timers::default();
    let mut link = Link { profile: profile.clone(), rng: ChaCha8Rng::seed_from_u64(profile.seed) };

    loop {
        let now = clock.now();
        if now >= duration {
            break;
        }
        while let Some(kind) = timers.pop_due(now) {
            let actions = gateway.on_timer(now, kind);
            dispatch_gateway(actions, now, clock, &mut link, &writers, &routes, &mut timers, &mut log, &mut observations);
        }
        let wake = timers.next_deadline().unwrap_or(duration).min(duration);
        let wait = clock.wall(wake.saturating_sub(clock.now())).max(Duration::from_micros(50));
        match rx.recv_timeout(wait) {
            Ok(Input::Conn(id, stream)) => {
                writers.insert(id, DelayedWriter::spawn(stream));
            }
            Ok(Input::Msg(conn, msg)) => {
                if let Message::Register { device_id, .. } = &msg {
                    routes.entry(*device_id).or_insert(conn);
                }
                let now = clock.now();
                let actions = gateway.handle(now, msg);
                dispatch_gateway(actions, now, clock, &mut link, &writers, &routes, &mut timers, &mut log, &mut observations);
            }
            Ok(Input::Closed(conn)) => {
                routes.retain(|_, c| *c != conn);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }

    shutdown.store(true, Ordering::Relaxed);
    let _ = accept.join();
    for (_, w) in writers.drain() {
        w.close();
    }
    for t in device_threads {
        match t.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => log::warn!("device thread ended with {e}"),
            Err(_) => return Err(Error::Transport("device thread panicked".into())),
        }
    }
    Ok(SocketOutcome {
        log,
        observations,
        estimates: gateway.estimates(),
        device_ids: gateway.device_ids(),
        final_z: gateway.z(),
        addr,
    })
}

#[allow(clippy::too_many_arguments)]
fn dispatch_gateway(
    actions: Vec<Action>,
    now: Nanos,
    clock: Clock,
    link: &mut Link,
    writers: &HashMap<u64, DelayedWriter>,
    routes: &HashMap<DeviceId, u64>,
    timers: &mut Timers,
    log: &mut SessionLog,
    observations: &mut Vec<Observation>,
) {
    for action in actions {
        match action {
            Action::Send { to: Node::Device(id), msg } => {
                let Some(w) = routes.get(&id).and_then(|c| writers.get(c)) else {
                    log.entries.push(LogEntry {
                        time_ns: now,
                        node: Node::Gateway,
                        event: super::EventKind::Unexpected { detail: format!("no route to device {id}") },
                    });
                    continue;
                };
                let delay = link.delay(id);
                w.send(clock.instant_of(now + delay), encode(&msg));
            }
            Action::Send { to: Node::Gateway, .. } => {}
            Action::SetTimer { after, kind } | Action::SetTimerAfterSend { after, kind } => timers.add(now + after, kind),
            Action::Observe(o) => observations.push(o),
            Action::Log(e) => log.push(now, Node::Gateway, e),
        }
    }
}

fn run_device(
    mut device: Device,
    start: Nanos,
    addr: SocketAddr,
    clock: Clock,
    profile: TransportProfile,
    shutdown: Arc<AtomicBool>,
) -> Result<()> {
    let begin = clock.instant_of(start);
    let now = Instant::now();
    if begin > now {
        thread::sleep(begin - now);
    }
    if shutdown.load(Ordering::Relaxed) {
        return Ok(());
    }
    let id = device.id();
    let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("device {id} connect: {e}")))?;
    let _ = stream.set_nodelay(true);
    let reader = stream.try_clone().map_err(|e| Error::Transport(e.to_string()))?;
    let (tx, rx): (Sender<Input>, Receiver<Input>) = mpsc::channel();
    spawn_reader(reader, 0, tx);
    let writer = DelayedWriter::spawn(stream);
    let mut link = Link { profile: profile.clone(), rng: ChaCha8Rng::seed_from_u64(profile.seed ^ (u64::from(id) + 1) * 0x9e37_79b9) };
    let mut timers = Timers::default();

    let mut pending = device.start();
    loop {
        let now = clock.now();
        let mut last_delay = 0;
        for action in pending.drain(..) {
            match action {
                Action::Send { msg, .. } => {
                    last_delay = link.delay(id);
                    writer.send(clock.instant_of(now + last_delay), encode(&msg));
                }
                Action::SetTimer { after, kind } => timers.add(now + after, kind),
                Action::SetTimerAfterSend { after, kind } => timers.add(now + last_delay + after, kind),
                Action::Log(e) => log::debug!("device {id}: {e:?}"),
                Action::Observe(_) => {}
            }
        }
        if shutdown.load(Ordering::Relaxed) {
            break;
        }
        let now = clock.now();
        if let Some(kind) = timers.pop_due(now) {
            pending = device.on_timer(now, kind);
            continue;
        }
        let wait = timers
            .next_deadline()
            .map_or(Duration::from_millis(20), |t| clock.wall(t.saturating_sub(now)))
            .clamp(Duration::from_micros(20), Duration::from_millis(20));
        match rx.recv_timeout(wait) {
            Ok(Input::Msg(_, msg)) => pending = device.handle(clock.now(), msg),
            Ok(Input::Closed(_)) | Err(RecvTimeoutError::Disconnected) => break,
            Ok(Input::Conn(..)) | Err(RecvTimeoutError::Timeout) => {}
        }
    }
    writer.close();
    Ok(())
}
