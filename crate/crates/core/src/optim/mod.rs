//! Deterministic ADMM kernels: the device-local x-update, the gateway
//! projection, the dual update, stopping residuals and an in-process driver
//! for the full decentralised loop.

mod projection;

pub use projection::{project_onto_feasible, project_with_multipliers, Projection};

use serde::{Deserialize, Serialize};

use crate::budget::ResourceBudget;
use crate::error::{Error, Result};
use crate::trace::{IterationTrace, Phase, TraceRow};
use crate::utility::UtilityFunction;

/// Bisection cap for the scalar x-update.
const MAX_BISECTIONS: usize = 200;
/// Doublings allowed when the initial x-update bracket has no sign change.
const MAX_BRACKET_DOUBLINGS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Augmented Lagrangian parameter.
    pub rho: f64,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub max_iterations: usize,
    pub projection_tol: f64,
    pub scalar_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 1.0,
            primal_tol: 1e-4,
            dual_tol: 1e-4,
            max_iterations: 2000,
            projection_tol: 1e-9,
            scalar_tol: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn with_rho(self, rho: f64) -> Self {
        SolverConfig { rho, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        for (name, v) in [
            ("primal_tol", self.primal_tol),
            ("dual_tol", self.dual_tol),
            ("projection_tol", self.projection_tol),
            ("scalar_tol", self.scalar_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Device primal `x`, gateway consensus `z` and scaled dual `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub iteration: u64,
}

impl AdmmState {
    /// `x = z = gamma`, `u = 0`.
    pub fn initial(budget: &ResourceBudget) -> Self {
        let gamma = budget.gamma().to_vec();
        AdmmState { x: gamma.clone(), z: gamma, u: vec![0.0; budget.len()], iteration: 0 }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// The only per-device signal a gateway sees besides `z`.
    pub fn v(&self) -> Vec<f64> {
        self.x.iter().zip(&self.u).map(|(x, u)| x + u).collect()
    }

    /// Appends a freshly joined device starting at its minimum frequency.
    pub fn push_device(&mut self, gamma: f64) {
        self.x.push(gamma);
        self.z.push(gamma);
        self.u.push(0.0);
    }
}

/// Maximises `h(x) - (rho/2)(x - z_i + u_i)^2` over the frequency axis `x >= 0`.
///
/// The stationarity residual `h'(x) - rho (x - z_i + u_i)` is strictly
/// decreasing for concave `h`; a nonpositive residual at `x = 0` means the
/// maximiser sits on the domain boundary. Otherwise bisection runs on
/// `[0, hi]` with `hi = max(z_i - u_i, 0) + |h'(0)| / rho`, doubling `hi` when
/// a manipulated (non-concave) utility leaves no sign change.
pub fn local_x_update(f: &UtilityFunction, z_i: f64, u_i: f64, cfg: &SolverConfig) -> Result<f64> {
    let target = z_i - u_i;
    let rho = cfg.rho;
    if let Some(pole) = f.pole() {
        if pole >= 0.0 {
            return Err(Error::Domain(format!(
                "utility pole at x = {pole} lies on the frequency axis; local objective is unbounded"
            )));
        }
    }
    let residual = |x: f64| -> Result<f64> { Ok(f.marginal(x)? - rho * (x - target)) };

    let at_zero = residual(0.0)?;
    if at_zero <= 0.0 {
        return Ok(0.0);
    }
    let mut hi = (target.max(0.0) + f.marginal(0.0)?.abs() / rho).max(1.0);
    let mut doublings = 0;
    while residual(hi)? > 0.0 {
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(Error::SolverFailure(format!(
                "no sign change of the stationarity residual on [0, {hi}] (non-concave utility {:?})",
                f.kind
            )));
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let r = residual(mid)?;
        if r.abs() <= cfg.scalar_tol {
            return Ok(mid);
        }
        if mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `u_i + x_i - z_i`
pub fn dual_u_update(u_i: f64, x_i: f64, z_i: f64) -> f64 {
    u_i + x_i - z_i
}

/// Primal and dual stopping residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
}

/// `primal = ||x - z||_2`, `dual = rho ||z - z_prev||_2`.
pub fn residuals(state: &AdmmState, z_prev: &[f64], rho: f64) -> Result<Residuals> {
    let n = state.x.len();
    if state.z.len() != n || z_prev.len() != n {
        return Err(Error::Contract(format!(
            "residual vectors differ in length (x {n}, z {}, z_prev {})",
            state.z.len(),
            z_prev.len()
        )));
    }
    let primal = state.x.iter().zip(&state.z).map(|(x, z)| (x - z) * (x - z)).sum::<f64>().sqrt();
    let dual = rho * state.z.iter().zip(z_prev).map(|(z, p)| (z - p) * (z - p)).sum::<f64>().sqrt();
    Ok(Residuals { primal, dual })
}

/// One completed ADMM round.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub residuals: Residuals,
}

impl StepRecord {
    pub fn converged(&self, cfg: &SolverConfig) -> bool {
        self.residuals.primal <= cfg.primal_tol && self.residuals.dual <= cfg.dual_tol
    }
}

/// Runs one decentralised round in process: every device solves its
/// x-update against `(z_i, u_i)`, the gateway projects `v = x + u`, and the
/// devices update their duals.
pub fn admm_step(
    state: &mut AdmmState,
    functions: &[UtilityFunction],
    budget: &ResourceBudget,
    cfg: &SolverConfig,
) -> Result<StepRecord> {
    let n = state.len();
    if functions.len() != n || budget.len() != n {
        return Err(Error::Contract(format!(
            "state has {n} devices, {} utilities, budget has {}",
            functions.len(),
            budget.len()
        )));
    }
    let x = functions
        .iter()
        .enumerate()
        .map(|(i, f)| local_x_update(f, state.z[i], state.u[i], cfg))
        .collect::<Result<Vec<_>>>()?;
    let v: Vec<f64> = x.iter().zip(&state.u).map(|(x, u)| x + u).collect();
    let z = project_onto_feasible(&v, budget, cfg)?;
    let z_prev = std::mem::replace(&mut state.z, z);
    state.x = x;
    for i in 0..n {
        state.u[i] = dual_u_update(state.u[i], state.x[i], state.z[i]);
    }
    let record = StepRecord {
        iteration: state.iteration,
        z: state.z.clone(),
        v,
        residuals: residuals(state, &z_prev, cfg.rho)?,
    };
    state.iteration += 1;
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub x: Vec<f64>,
    pub state: AdmmState,
    pub iterations: usize,
    pub converged: bool,
    pub trace: IterationTrace,
}

/// Full ADMM loop from `x = z = gamma`, `u = 0`.
pub fn admm_solve(functions: &[UtilityFunction], budget: &ResourceBudget, cfg: &SolverConfig) -> Result<AdmmOutcome> {
    admm_solve_from(AdmmState::initial(budget), functions, budget, cfg)
}

/// Full ADMM loop resumed from an existing state (reconfiguration path).
pub fn admm_solve_from(
    mut state: AdmmState,
    functions: &[UtilityFunction],
    budget: &ResourceBudget,
    cfg: &SolverConfig,
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let mut trace = IterationTrace::new(budget.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let rec = admm_step(&mut state, functions, budget, cfg)?;
        iterations += 1;
        let done = rec.converged(cfg);
        trace.push(TraceRow::new(rec.iteration, rec.z, rec.v, 0, Phase::Normal));
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("ADMM stopped at max_iterations = {} without meeting tolerances", cfg.max_iterations);
    }
    Ok(AdmmOutcome { x: state.x.clone(), state, iterations, converged, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::presets;

    #[test]
    fn x_update_closed_forms() {
        let f2 = presets::allocation_set()[1];
        let cfg = SolverConfig::default();
        assert!((local_x_update(&f2, 4.0, 0.0, &cfg).unwrap() - 4.0).abs() < 1e-8);
        assert!((local_x_update(&f2, 0.0, 0.0, &cfg).unwrap() - 8.0 / 3.0).abs() < 1e-8);
        let cfg2 = SolverConfig::default().with_rho(2.0);
        assert!((local_x_update(&f2, 0.0, 0.0, &cfg2).unwrap() - 2.0).abs() < 1e-8);
        // z - u = 4 expressed through a nonzero dual
        assert!((local_x_update(&f2, 5.0, 1.0, &cfg).unwrap() - 4.0).abs() < 1e-8);
    }

    #[test]
    fn x_update_stops_at_domain_boundary() {
        // h1'(0) = -18, far below a penalty pull towards 1.
        let f1 = presets::allocation_set()[0];
        assert_eq!(local_x_update(&f1, 1.0, 0.0, &SolverConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn x_update_rejects_pole_on_axis() {
        let f = UtilityFunction::new(crate::utility::UtilityKind::Reciprocal);
        assert!(matches!(local_x_update(&f, 2.0, 0.0, &SolverConfig::default()), Err(Error::Domain(_))));
        // pole pushed below zero: concave increasing on x >= 0
        let g = f.with_shift(10.0);
        let x = local_x_update(&g, 2.0, 0.0, &SolverConfig::default()).unwrap();
        assert!(x > 2.0);
    }

    #[test]
    fn dual_update_examples() {
        assert_eq!(dual_u_update(0.0, 4.0, 4.0), 0.0);
        assert_eq!(dual_u_update(0.5, 3.0, 2.0), 1.5);
        assert!((dual_u_update(-0.2, 1.0, 1.1) - (-0.3)).abs() < 1e-15);
    }

    #[test]
    fn residual_examples() {
        let s = AdmmState { x: vec![1.0, 4.0], z: vec![1.0, 4.0], u: vec![0.0; 2], iteration: 0 };
        assert_eq!(residuals(&s, &[1.0, 4.0], 1.0).unwrap(), Residuals { primal: 0.0, dual: 0.0 });
        let s = AdmmState { x: vec![1.0, 4.0], z: vec![1.0, 3.0], u: vec![0.0; 2], iteration: 0 };
        assert_eq!(residuals(&s, &[1.0, 3.0], 1.0).unwrap(), Residuals { primal: 1.0, dual: 0.0 });
        assert!(residuals(&s, &[1.0], 1.0).is_err());
    }

    #[test]
    fn single_device_reaches_vertex() {
        let b = ResourceBudget::new(10.0, 15.0, vec![3.0], vec![1.0]).unwrap();
        let out = admm_solve(&[presets::allocation_set()[1]], &b, &SolverConfig::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let b = ResourceBudget::with_default_gamma(10.0, 15.0, vec![2.0, 3.0, 5.0]).unwrap();
        let cfg = SolverConfig { max_iterations: 3, ..Default::default() };
        let out = admm_solve(&presets::allocation_set(), &b, &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.trace.rows().len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig::default().with_rho(0.0).validate().is_err());
        assert!(SolverConfig { scalar_tol: -1.0, ..Default::default() }.validate().is_err());
    }
}
