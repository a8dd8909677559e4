use edgefreq_core::netsim::sim::Simulation;
use edgefreq_core::netsim::socket::run_socket_session;
use edgefreq_core::netsim::{
    secs_to_nanos, Device, DeviceId, FrequencyEstimate, GatewayConfig, GatewayPhase, Observation, SessionLog,
    TransportMode,
};
use edgefreq_core::trace::{IterationTrace, Phase, TraceRow};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{csv_line, RunDir};

#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub device_id: DeviceId,
    pub a: f64,
    pub theoretical_hz: f64,
    pub estimated_hz: f64,
    pub window_packets: usize,
    pub delay_ms: f64,
}

/// Resource use at one sampling instant of the data phase.
#[derive(Debug, Clone, Serialize)]
pub struct UsageSample {
    pub time_s: f64,
    pub devices: usize,
    pub frequency_sum: f64,
    pub c: f64,
    pub storage_rate: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub transport: TransportMode,
    pub device_ids: Vec<DeviceId>,
    pub final_z: Vec<f64>,
    pub rounds: usize,
    pub converged_events: usize,
    pub estimates: Vec<EstimateRow>,
    pub usage: Vec<UsageSample>,
}

impl SimulationReport {
    pub fn estimate(&self, id: DeviceId) -> Option<&EstimateRow> {
        self.estimates.iter().find(|e| e.device_id == id)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "scenario {} over {:?} transport: {} rounds, {} convergence events\n",
            self.scenario,
            self.transport,
            self.rounds,
            self.converged_events
        );
        s.push_str(&format!("{:<8}{:>14}{:>14}{:>10}{:>12}\n", "device", "theory (Hz)", "estimate", "packets", "delay (ms)"));
        for e in &self.estimates {
            s.push_str(&format!(
                "{:<8}{:>14.4}{:>14.4}{:>10}{:>12.3}\n",
                e.device_id, e.theoretical_hz, e.estimated_hz, e.window_packets, e.delay_ms
            ));
        }
        if let Some(peak) = self.usage.iter().map(|u| u.storage_rate / u.d).reduce(f64::max) {
            s.push_str(&format!("peak storage use {:.2}% of d\n", 100.0 * peak));
        }
        s
    }
}

fn gateway_config(cfg: &RunConfig) -> GatewayConfig {
    let sim = &cfg.simulate;
    GatewayConfig {
        solver: cfg.solver.clone(),
        expected_devices: cfg.devices.iter().filter(|d| d.join_at_s == 0.0).count(),
        handshake_rounds: Some(sim.handshake_rounds),
        round_timeout_ms: sim
            .round_timeout_ms
            .unwrap_or_else(|| GatewayConfig::default_round_timeout_ms(cfg.transport.max_delay_ms())),
        stale_policy: sim.stale_policy,
        estimation_window: sim.estimation_window,
    }
}

fn devices(cfg: &RunConfig) -> Vec<(Device, u64)> {
    cfg.devices
        .iter()
        .map(|d| (Device::new(d.id, d.utility, d.a, d.gamma, cfg.solver.clone()), secs_to_nanos(d.join_at_s)))
        .collect()
}

fn size_of(cfg: &RunConfig, id: DeviceId) -> f64 {
    cfg.devices.iter().find(|d| d.id == id).map(|d| d.a).unwrap_or(f64::NAN)
}

fn usage(cfg: &RunConfig, time_s: f64, estimates: &[FrequencyEstimate]) -> UsageSample {
    UsageSample {
        time_s,
        devices: estimates.len(),
        frequency_sum: estimates.iter().map(|e| e.estimated_hz).sum(),
        c: cfg.budget.c,
        storage_rate: estimates.iter().map(|e| size_of(cfg, e.device_id) * e.estimated_hz).sum(),
        d: cfg.budget.d,
    }
}

struct Session {
    log: SessionLog,
    observations: Vec<Observation>,
    estimates: Vec<FrequencyEstimate>,
    device_ids: Vec<DeviceId>,
    final_z: Vec<f64>,
    usage: Vec<UsageSample>,
}

fn run_simulated(cfg: &RunConfig) -> Result<Session, CliError> {
    let mut sim = Simulation::new(cfg.budget.c, cfg.budget.d, gateway_config(cfg), cfg.transport.clone())?;
    for (device, at) in devices(cfg) {
        sim.add_device(device, at)?;
    }
    let mut usage_series = Vec::new();
    let step = cfg.simulate.sample_every_s;
    let mut k = 1u64;
    loop {
        let t = step * k as f64;
        if t > cfg.simulate.duration_s {
            break;
        }
        sim.run_until(secs_to_nanos(t));
        if sim.gateway().phase() == GatewayPhase::Streaming {
            let est = sim.gateway().estimates();
            if !est.is_empty() {
                usage_series.push(usage(cfg, t, &est));
            }
        }
        k += 1;
    }
    sim.run_until(secs_to_nanos(cfg.simulate.duration_s));
    let gw = sim.gateway();
    Ok(Session {
        estimates: gw.estimates(),
        device_ids: gw.device_ids(),
        final_z: gw.z(),
        log: sim.log().clone(),
        observations: sim.observations().to_vec(),
        usage: usage_series,
    })
}

fn run_socket(cfg: &RunConfig) -> Result<Session, CliError> {
    let duration = secs_to_nanos(cfg.simulate.duration_s);
    let out = run_socket_session(cfg.budget.c, cfg.budget.d, gateway_config(cfg), cfg.transport.clone(), devices(cfg), duration)?;
    let usage = if out.estimates.is_empty() { Vec::new() } else { vec![usage(cfg, cfg.simulate.duration_s, &out.estimates)] };
    Ok(Session {
        log: out.log,
        observations: out.observations,
        estimates: out.estimates,
        device_ids: out.device_ids,
        final_z: out.final_z,
        usage,
    })
}

/// Runs the gateway and devices end to end and reports the gateway's
/// frequency estimates, consensus history and resource use.
pub fn cmd_simulate(cfg: &RunConfig, out: Option<&mut RunDir>) -> Result<SimulationReport, CliError> {
    let session = match cfg.transport.mode {
        TransportMode::Simulated => run_simulated(cfg)?,
        TransportMode::Socket => run_socket(cfg)?,
    };
    let estimates: Vec<EstimateRow> = session
        .estimates
        .iter()
        .filter_map(|e| {
            let k = session.device_ids.iter().position(|id| *id == e.device_id)?;
            let theory = session.final_z[k];
            Some(EstimateRow {
                device_id: e.device_id,
                a: size_of(cfg, e.device_id),
                theoretical_hz: theory,
                estimated_hz: e.estimated_hz,
                window_packets: e.window_packets,
                delay_ms: 1e3 * (1.0 / e.estimated_hz - 1.0 / theory),
            })
        })
        .collect();
    let report = SimulationReport {
        scenario: cfg.scenario.clone(),
        transport: cfg.transport.mode,
        device_ids: session.device_ids.clone(),
        final_z: session.final_z.clone(),
        rounds: session.observations.len(),
        converged_events: session.log.count(|e| matches!(e, edgefreq_core::netsim::EventKind::Converged { .. })),
        estimates,
        usage: session.usage.clone(),
    };
    if let Some(dir) = out {
        write_artifacts(cfg, dir, &report, &session)?;
    }
    Ok(report)
}

fn write_artifacts(cfg: &RunConfig, dir: &mut RunDir, report: &SimulationReport, session: &Session) -> Result<(), CliError> {
    let mut est = String::from("device_id,a,theoretical_hz,estimated_hz,window_packets,delay_ms\n");
    for e in &report.estimates {
        csv_line(
            &mut est,
            &[
                e.device_id.to_string(),
                e.a.to_string(),
                e.theoretical_hz.to_string(),
                e.estimated_hz.to_string(),
                e.window_packets.to_string(),
                e.delay_ms.to_string(),
            ],
        );
    }
    dir.write("estimates.csv", &est)?;

    // long format: rows only exist for devices admitted by that round
    let mut z = String::from("iteration,device_id,z,v\n");
    for o in &session.observations {
        for (k, (zk, vk)) in o.z.iter().zip(&o.v).enumerate() {
            csv_line(&mut z, &[o.iteration.to_string(), session.device_ids[k].to_string(), zk.to_string(), vk.to_string()]);
        }
    }
    dir.write("z_series.csv", &z)?;

    let mut u = String::from("time_s,devices,frequency_sum,c,storage_rate,d\n");
    for s in &report.usage {
        csv_line(
            &mut u,
            &[
                s.time_s.to_string(),
                s.devices.to_string(),
                s.frequency_sum.to_string(),
                s.c.to_string(),
                s.storage_rate.to_string(),
                s.d.to_string(),
            ],
        );
    }
    dir.write("usage_series.csv", &u)?;
    dir.write("session.jsonl", &session.log.to_jsonl())?;

    // a fixed-width trace exists only when nobody joined mid-session
    let n = session.device_ids.len();
    if session.observations.iter().all(|o| o.z.len() == n) && !session.observations.is_empty() {
        let ordered: Vec<usize> = session
            .device_ids
            .iter()
            .map(|id| cfg.devices.iter().position(|d| d.id == *id).expect("admitted devices are configured"))
            .collect();
        let budget = edgefreq_core::budget::ResourceBudget::new(
            cfg.budget.c,
            cfg.budget.d,
            ordered.iter().map(|k| cfg.devices[*k].a).collect(),
            ordered.iter().map(|k| cfg.devices[*k].gamma).collect(),
        )?;
        let mut trace = IterationTrace::new(budget);
        for o in &session.observations {
            trace.push(TraceRow::new(o.iteration, o.z.clone(), o.v.clone(), 0, Phase::Normal));
        }
        trace.export(&dir.path("session.trace"))?;
        dir.record("session.trace");
    }
    dir.write_json("simulation.json", report)?;
    dir.write("simulation.txt", &report.render())?;
    Ok(())
}
