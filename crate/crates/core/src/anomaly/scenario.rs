//! Labelled attack campaigns: alternating normal and manipulated phases on a
//! running ADMM loop, recorded row by row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{inject, Label, ManipulationSpec};
use super::{INPUT_FACTOR_RANGE, MWF_FACTOR_RANGE, SIZE_FACTOR_RANGE, STORAGE_FACTOR_RANGE};
use crate::budget::ResourceBudget;
use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::netsim::sim::Simulation;
use crate::netsim::{
    secs_to_nanos, BudgetDelta, Device, DeviceSnapshot, GatewayConfig, GatewaySnapshot, StalePolicy, TransportProfile,
};
use crate::optim::{admm_step, AdmmState, SolverConfig};
use crate::trace::{IterationTrace, Phase, TraceRow};
use crate::utility::{presets, UtilityKind};

/// Redraws allowed before a manipulation class is declared impossible.
const MAX_DRAWS: usize = 100;

/// The three-device system used for all anomaly experiments.
pub fn anomaly_experiment_instance() -> Instance {
    Instance {
        functions: presets::anomaly_set().to_vec(),
        budget: ResourceBudget::with_default_gamma(10.0, 20.0, vec![2.0, 3.0, 5.0]).expect("static budget is valid"),
    }
}

/// Campaign shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Labels drawn (uniformly) for each manipulated phase. Empty means the
    /// run stays normal throughout.
    pub labels: Vec<Label>,
    /// Device index attacked by labels 1-3.
    pub target: usize,
    /// Inclusive bounds on normal phase length, in iterations.
    pub normal_len: (u64, u64),
    /// Inclusive bounds on manipulated phase length.
    pub anomalous_len: (u64, u64),
    /// Roll a device manipulation back to the state captured just before it
    /// began. Without this the loop has to climb back from wherever the
    /// attack left it.
    pub remediate: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            labels: vec![Label::FunctionAndInput, Label::DataSize, Label::InputOnly],
            target: 0,
            normal_len: (100, 120),
            anomalous_len: (50, 70),
            remediate: true,
        }
    }
}

impl ScenarioSpec {
    pub fn only(label: Label) -> Self {
        ScenarioSpec { labels: vec![label], ..Default::default() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.target >= n {
            return Err(Error::InvalidConfig(format!("target device {} out of range for {n} devices", self.target)));
        }
        for (name, (lo, hi)) in [("normal_len", self.normal_len), ("anomalous_len", self.anomalous_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidConfig(format!("{name} must be a nonempty range of positive lengths")));
            }
        }
        Ok(())
    }
}

/// Where the ADMM loop runs.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioMode {
    /// Lock-step rounds in process; the true `x` is recorded too.
    InProcess(SolverConfig),
    /// Gateway and devices exchange frames over a simulated network.
    Networked { gateway: GatewayConfig, profile: TransportProfile },
}

/// The delayed, jittery network used for networked campaigns. The round
/// timeout sits just above the slowest mean round trip, so a jitter spike
/// makes the gateway close the round on a device's previous report.
pub fn networked_profile(seed: u64) -> (GatewayConfig, TransportProfile) {
    let profile = TransportProfile {
        base_delay_ms: 2.0,
        jitter_ms: 1.5,
        device_delay_ms: vec![(1, 1.6), (2, 4.3), (3, 3.0)],
        seed,
        ..Default::default()
    };
    let gateway = GatewayConfig {
        handshake_rounds: None,
        round_timeout_ms: 9.5,
        stale_policy: StalePolicy::ProceedWithStale,
        ..Default::default()
    };
    (gateway, profile)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub start: u64,
    /// Rows actually recorded (the last phase may be cut short).
    pub len: u64,
    pub label: Label,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation: Option<ManipulationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub iteration: u64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub trace: IterationTrace,
    pub phases: Vec<PhaseRecord>,
    /// Iterations at which the operator acted (remedied a manipulation or
    /// changed the budget); a detector re-baselines from these.
    pub resets: Vec<u64>,
    pub events: Vec<ScenarioEvent>,
    /// True per-device `x` for each row; empty for networked runs.
    pub x: Vec<Vec<f64>>,
}

struct Step {
    z: Vec<f64>,
    v: Vec<f64>,
    x: Option<Vec<f64>>,
}

enum Checkpoint {
    InProcess(AdmmState),
    Networked(GatewaySnapshot, Vec<DeviceSnapshot>),
}

trait Backend {
    fn step(&mut self) -> Result<Step>;
    fn checkpoint(&self) -> Checkpoint;
    fn restore(&mut self, cp: &Checkpoint) -> Result<()>;
    fn apply(&mut self, problem: &Instance) -> Result<()>;
}

struct InProcess {
    state: AdmmState,
    problem: Instance,
    cfg: SolverConfig,
}

impl Backend for InProcess {
    fn step(&mut self) -> Result<Step> {
        let rec = admm_step(&mut self.state, &self.problem.functions, &self.problem.budget, &self.cfg)?;
        Ok(Step { z: rec.z, v: rec.v, x: Some(self.state.x.clone()) })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::InProcess(self.state.clone())
    }

    fn restore(&mut self, cp: &Checkpoint) -> Result<()> {
        match cp {
            Checkpoint::InProcess(s) => {
                self.state = s.clone();
                Ok(())
            }
            Checkpoint::Networked(..) => Err(Error::Contract("networked checkpoint in an in-process run".into())),
        }
    }

    fn apply(&mut self, problem: &Instance) -> Result<()> {
        self.problem = problem.clone();
        Ok(())
    }
}

struct Networked {
    sim: Simulation,
    n: usize,
    round: u64,
}

impl Networked {
    fn new(problem: &Instance, gateway: &GatewayConfig, profile: &TransportProfile) -> Result<Self> {
        let n = problem.functions.len();
        let cfg = GatewayConfig { expected_devices: n, handshake_rounds: None, ..gateway.clone() };
        let b = &problem.budget;
        let mut sim = Simulation::new(b.c(), b.d(), cfg.clone(), profile.clone())?;
        for (i, f) in problem.functions.iter().enumerate() {
            sim.add_device(Device::new(Self::id(i), *f, b.a()[i], b.gamma()[i], cfg.solver.clone()), 0)?;
        }
        Ok(Networked { sim, n, round: 0 })
    }

    fn id(i: usize) -> u32 {
        i as u32 + 1
    }
}

impl Backend for Networked {
    fn step(&mut self) -> Result<Step> {
        if self.sim.gateway().is_paused() {
            self.sim.resume_gateway();
        }
        let target = self.round + 1;
        let deadline = self.sim.now() + secs_to_nanos(60.0);
        if !self.sim.run_rounds_until(target, deadline) {
            return Err(Error::Transport(format!("round {} did not close within a minute of virtual time", self.round)));
        }
        if self.sim.any_device_failed() {
            return Err(Error::Transport("a device aborted during the campaign".into()));
        }
        self.round = target;
        let obs = self.sim.take_observations().pop().expect("a closed round was observed");
        Ok(Step { z: obs.z, v: obs.v, x: None })
    }

    fn checkpoint(&self) -> Checkpoint {
        let devices = (0..self.n).map(|i| self.sim.device(Self::id(i)).expect("device exists").snapshot()).collect();
        Checkpoint::Networked(self.sim.gateway().snapshot(), devices)
    }

    fn restore(&mut self, cp: &Checkpoint) -> Result<()> {
        let Checkpoint::Networked(gw, devices) = cp else {
            return Err(Error::Contract("in-process checkpoint in a networked run".into()));
        };
        self.sim.gateway_mut().restore(gw)?;
        for (i, s) in devices.iter().enumerate() {
            self.sim.device_mut(Self::id(i)).expect("device exists").restore(*s);
        }
        Ok(())
    }

    fn apply(&mut self, problem: &Instance) -> Result<()> {
        let b = &problem.budget;
        for (i, f) in problem.functions.iter().enumerate() {
            let d = self.sim.device_mut(Self::id(i)).expect("device exists");
            d.set_utility(*f);
            d.set_size(b.a()[i]);
        }
        let sizes = (0..self.n).map(|i| (Self::id(i), b.a()[i])).collect();
        self.sim.gateway_mut().apply_delta(&BudgetDelta { c: Some(b.c()), d: Some(b.d()), sizes })
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Draws a manipulation of class `label` that `inject` accepts, logging each
/// rejected draw.
fn draw_manipulation(
    label: Label,
    target: usize,
    base: &Instance,
    rng: &mut ChaCha8Rng,
    at: u64,
    events: &mut Vec<ScenarioEvent>,
) -> Result<(ManipulationSpec, Instance)> {
    for _ in 0..MAX_DRAWS {
        let spec = match label {
            Label::Normal => ManipulationSpec::systemic(
                Some(uniform(rng, MWF_FACTOR_RANGE)),
                Some(uniform(rng, STORAGE_FACTOR_RANGE)),
            ),
            Label::FunctionAndInput => {
                let set = UtilityKind::REPLACEMENT_SET;
                let kind = set[rng.random_range(0..set.len())];
                ManipulationSpec::function_and_input(target, kind, uniform(rng, INPUT_FACTOR_RANGE))
            }
            Label::DataSize => ManipulationSpec::data_size(target, uniform(rng, SIZE_FACTOR_RANGE)),
            Label::InputOnly => ManipulationSpec::input_only(target, uniform(rng, INPUT_FACTOR_RANGE)),
        };
        match inject(&spec, base) {
            Ok(problem) => return Ok((spec, problem)),
            Err(e @ (Error::Domain(_) | Error::InfeasibleBudget(_) | Error::Contract(_))) => {
                events.push(ScenarioEvent { iteration: at, detail: format!("redrawing label {}: {e}", label.as_u8()) });
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidConfig(format!("no valid label-{} manipulation in {MAX_DRAWS} draws", label.as_u8())))
}

/// Runs `length` ADMM iterations on `base`, alternating normal phases with
/// manipulated ones, and records every row. Identical arguments give an
/// identical scenario.
pub fn generate_scenario(
    seed: u64,
    length: usize,
    base: &Instance,
    spec: &ScenarioSpec,
    mode: &ScenarioMode,
) -> Result<Scenario> {
    let n = base.functions.len();
    spec.validate(n)?;
    let mut backend: Box<dyn Backend> = match mode {
        ScenarioMode::InProcess(cfg) => {
            cfg.validate()?;
            Box::new(InProcess { state: AdmmState::initial(&base.budget), problem: base.clone(), cfg: cfg.clone() })
        }
        ScenarioMode::Networked { gateway, profile } => Box::new(Networked::new(base, gateway, profile)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = IterationTrace::new(base.budget.clone());
    let mut phases: Vec<PhaseRecord> = Vec::new();
    let mut resets = Vec::new();
    let mut events = Vec::new();
    let mut xs = Vec::new();
    let mut checkpoint: Option<Checkpoint> = None;

    let draw_len = |rng: &mut ChaCha8Rng, (lo, hi): (u64, u64)| rng.random_range(lo..=hi);
    let mut remaining = draw_len(&mut rng, spec.normal_len);
    phases.push(PhaseRecord { start: 0, len: 0, label: Label::Normal, phase: Phase::Normal, manipulation: None });

    for t in 0..length as u64 {
        if remaining == 0 {
            let current = phases.last().expect("a phase is always open");
            let next = if current.phase == Phase::Normal && !spec.labels.is_empty() {
                let label = spec.labels[rng.random_range(0..spec.labels.len())];
                let (m, problem) = draw_manipulation(label, spec.target, base, &mut rng, t, &mut events)?;
                checkpoint = Some(backend.checkpoint());
                backend.apply(&problem)?;
                if label == Label::Normal {
                    resets.push(t);
                }
                remaining = draw_len(&mut rng, spec.anomalous_len);
                PhaseRecord { start: t, len: 0, label, phase: Phase::Anomalous, manipulation: Some(m) }
            } else {
                if current.phase == Phase::Anomalous {
                    backend.apply(base)?;
                    if spec.remediate && current.label.is_anomaly() {
                        backend.restore(checkpoint.as_ref().expect("taken at phase start"))?;
                    }
                    resets.push(t);
                }
                remaining = draw_len(&mut rng, spec.normal_len);
                PhaseRecord { start: t, len: 0, label: Label::Normal, phase: Phase::Normal, manipulation: None }
            };
            phases.push(next);
        }
        let step = backend.step()?;
        let phase = phases.last_mut().expect("a phase is always open");
        phase.len += 1;
        trace.push(TraceRow::new(t, step.z, step.v, phase.label.as_u8(), phase.phase));
        if let Some(x) = step.x {
            xs.push(x);
        }
        remaining -= 1;
    }
    Ok(Scenario { trace, phases, resets, events, x: xs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn in_process() -> ScenarioMode {
        ScenarioMode::InProcess(SolverConfig::default())
    }

    #[test]
    fn phases_tile_the_trace() {
        let s = generate_scenario(3, 1000, &anomaly_experiment_instance(), &ScenarioSpec::default(), &in_process())
            .unwrap();
        assert_eq!(s.trace.len(), 1000);
        assert_eq!(s.x.len(), 1000);
        let mut next = 0;
        for (k, p) in s.phases.iter().enumerate() {
            assert_eq!(p.start, next);
            next += p.len;
            let expected_phase = if k % 2 == 0 { Phase::Normal } else { Phase::Anomalous };
            assert_eq!(p.phase, expected_phase);
            let last = k + 1 == s.phases.len();
            if !last {
                let (lo, hi) = if p.phase == Phase::Normal { (100, 120) } else { (50, 70) };
                assert!((lo..=hi).contains(&p.len), "{p:?}");
            }
            for row in &s.trace.rows()[p.start as usize..(p.start + p.len) as usize] {
                assert_eq!(row.label, p.label.as_u8());
                assert_eq!(row.phase, p.phase);
            }
        }
        assert_eq!(next, 1000);
        s.trace.check_labels().unwrap();
    }

    #[test]
    fn reciprocal_draws_are_logged_and_replaced() {
        let spec = ScenarioSpec::only(Label::FunctionAndInput);
        let s = generate_scenario(0, 3600, &anomaly_experiment_instance(), &spec, &in_process()).unwrap();
        assert!(s.events.iter().any(|e| e.detail.contains("reciprocal")));
        for p in s.phases.iter().filter(|p| p.phase == Phase::Anomalous) {
            let m = p.manipulation.as_ref().unwrap();
            assert_ne!(m.new_function, Some(UtilityKind::Reciprocal));
        }
    }

    #[test]
    fn remediation_restores_the_checkpoint() {
        let spec = ScenarioSpec::only(Label::InputOnly);
        let s = generate_scenario(5, 400, &anomaly_experiment_instance(), &spec, &in_process()).unwrap();
        let end = s.phases[1].start + s.phases[1].len;
        let before = &s.trace.rows()[s.phases[1].start as usize - 1].z;
        let after = &s.trace.rows()[end as usize].z;
        for (a, b) in before.iter().zip(after) {
            assert!((a - b).abs() < 1e-3, "{before:?} vs {after:?}");
        }
        assert_eq!(s.resets[0], end);
        assert_eq!(super::super::operator_resets(&s.trace), s.resets);
    }

    #[test]
    fn resets_survive_the_trace_file() {
        let spec = ScenarioSpec { labels: vec![Label::Normal, Label::InputOnly], ..Default::default() };
        let s = generate_scenario(12, 3600, &anomaly_experiment_instance(), &spec, &in_process()).unwrap();
        assert!(s.phases.iter().any(|p| p.label == Label::Normal && p.phase == Phase::Anomalous));
        let back = IterationTrace::from_text(&s.trace.to_text()).unwrap();
        assert_eq!(super::super::operator_resets(&back), s.resets);
    }

    #[test]
    fn bad_spec_is_rejected() {
        let spec = ScenarioSpec { target: 3, ..Default::default() };
        assert!(generate_scenario(0, 10, &anomaly_experiment_instance(), &spec, &in_process()).is_err());
        let spec = ScenarioSpec { normal_len: (10, 5), ..Default::default() };
        assert!(generate_scenario(0, 10, &anomaly_experiment_instance(), &spec, &in_process()).is_err());
    }
}
