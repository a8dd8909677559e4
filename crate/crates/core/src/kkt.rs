//! Optimality certificates and an independent reference solver.
//!
//! Nothing in here shares code with the ADMM kernels: the reference solver
//! uses Dykstra's alternating projections and a nested dual bisection, so it
//! can serve as a test oracle for the production path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::ResourceBudget;
use crate::error::{Error, Result};
use crate::utility::UtilityFunction;

/// Which coupling constraints bind at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    /// Both couplings slack.
    Interior,
    /// Only the total-frequency cap binds.
    G1Active,
    /// Only the storage budget binds.
    G2Active,
    BothActive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktCertificate {
    pub lambda1: f64,
    pub lambda2: f64,
    pub situation: Situation,
    /// Largest violation of stationarity over free coordinates, and of the
    /// sign condition on the implicit multipliers of bound coordinates.
    pub stationarity_residual: f64,
    /// Coordinates sitting on their minimum frequency.
    pub active_lower_bounds: Vec<usize>,
    /// Multipliers are not uniquely determined (both couplings active with
    /// fewer than two free coordinates, or no free coordinate at all).
    pub degenerate: bool,
}

impl KktCertificate {
    pub fn is_free(&self, i: usize) -> bool {
        !self.active_lower_bounds.contains(&i)
    }
}

/// Floor applied to the caller's tolerance when deciding constraint activity.
const ACTIVITY_FLOOR: f64 = 1e-6;

fn activity_tol(tol: f64, bound: f64) -> f64 {
    tol.max(ACTIVITY_FLOOR) * bound.abs().max(1.0)
}

/// Classifies `x` and estimates the coupling multipliers by nonnegative
/// least squares on the stationarity rows `h_i'(x_i) = l1 + l2 a_i` of the
/// coordinates strictly above their minimum frequency.
pub fn check_kkt(x: &[f64], functions: &[UtilityFunction], budget: &ResourceBudget, tol: f64) -> Result<KktCertificate> {
    let n = budget.len();
    if x.len() != n || functions.len() != n {
        return Err(Error::Contract(format!(
            "point has {} entries, {} utilities, budget has {n} devices",
            x.len(),
            functions.len()
        )));
    }
    if !budget.contains(x, tol) {
        return Err(Error::Contract(format!("point {x:?} is not feasible within {tol}")));
    }
    let g1_active = budget.g1(x).abs() <= activity_tol(tol, budget.c());
    let g2_active = budget.g2(x).abs() <= activity_tol(tol, budget.d());
    let situation = match (g1_active, g2_active) {
        (false, false) => Situation::Interior,
        (true, false) => Situation::G1Active,
        (false, true) => Situation::G2Active,
        (true, true) => Situation::BothActive,
    };

    let marginals = functions.iter().zip(x).map(|(f, &xi)| f.marginal(xi)).collect::<Result<Vec<_>>>()?;
    let a = budget.a();
    let gamma = budget.gamma();
    let lower: Vec<usize> = (0..n).filter(|&i| x[i] <= gamma[i] + tol).collect();
    let free: Vec<usize> = (0..n).filter(|i| !lower.contains(i)).collect();

    let (lambda1, lambda2, degenerate) = estimate_multipliers(&free, &lower, &marginals, a, g1_active, g2_active);

    let mut residual: f64 = 0.0;
    for i in 0..n {
        let r = marginals[i] - lambda1 - lambda2 * a[i];
        residual = residual.max(if free.contains(&i) { r.abs() } else { r.max(0.0) });
    }
    Ok(KktCertificate {
        lambda1,
        lambda2,
        situation,
        stationarity_residual: residual,
        active_lower_bounds: lower,
        degenerate: degenerate || situation == Situation::BothActive && free.len() < 2,
    })
}

fn estimate_multipliers(
    free: &[usize],
    lower: &[usize],
    m: &[f64],
    a: &[f64],
    g1: bool,
    g2: bool,
) -> (f64, f64, bool) {
    if free.is_empty() {
        // Every coordinate is pinned: pick the smallest multiplier that makes
        // all implicit lower-bound multipliers nonnegative.
        let l1 = if g1 { lower.iter().map(|&i| m[i]).fold(0.0, f64::max) } else { 0.0 };
        let l2 = if g2 && !g1 { lower.iter().map(|&i| m[i] / a[i]).fold(0.0, f64::max) } else { 0.0 };
        return (l1, l2, g1 || g2);
    }
    let sse = |l1: f64, l2: f64| free.iter().map(|&i| (m[i] - l1 - l2 * a[i]).powi(2)).sum::<f64>();
    let only1 = || (free.iter().map(|&i| m[i]).sum::<f64>() / free.len() as f64).max(0.0);
    let only2 = || {
        let num: f64 = free.iter().map(|&i| a[i] * m[i]).sum();
        let den: f64 = free.iter().map(|&i| a[i] * a[i]).sum();
        (num / den).max(0.0)
    };
    match (g1, g2) {
        (false, false) => (0.0, 0.0, false),
        (true, false) => (only1(), 0.0, false),
        (false, true) => (0.0, only2(), false),
        (true, true) => {
            let k = free.len() as f64;
            let sa: f64 = free.iter().map(|&i| a[i]).sum();
            let saa: f64 = free.iter().map(|&i| a[i] * a[i]).sum();
            let sm: f64 = free.iter().map(|&i| m[i]).sum();
            let sam: f64 = free.iter().map(|&i| a[i] * m[i]).sum();
            let det = k * saa - sa * sa;
            let mut candidates = vec![(only1(), 0.0), (0.0, only2()), (0.0, 0.0)];
            let singular = det.abs() <= 1e-12 * (k * saa).max(1.0);
            if !singular {
                let l1 = (saa * sm - sa * sam) / det;
                let l2 = (k * sam - sa * sm) / det;
                if l1 >= 0.0 && l2 >= 0.0 {
                    return (l1, l2, false);
                }
                candidates.push((l1.max(0.0), l2.max(0.0)));
            }
            let (l1, l2) = candidates
                .into_iter()
                .min_by(|p, q| sse(p.0, p.1).total_cmp(&sse(q.0, q.1)))
                .expect("nonempty candidate list");
            (l1, l2, singular)
        }
    }
}

/// Expected movement of a device's optimum when device `j` is pushed up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpectedResponse {
    /// The manipulated device itself.
    Target,
    DownOrEqual,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponsePrediction {
    pub per_device: Vec<ExpectedResponse>,
    /// Set for [`Situation::BothActive`], where the two multipliers can trade
    /// off and the sign guarantee is not backed by the single-constraint
    /// argument.
    pub degenerate: bool,
}

/// Direction in which the other devices' optima move when device `j`'s
/// unconstrained maximiser moves up.
///
/// With a binding coupling constraint the extra share claimed by `j` has to
/// come out of everybody else; with slack couplings the other optima are
/// already unconstrained and stay put.
pub fn predict_response_direction(situation: Situation, j: usize, n: usize) -> Result<ResponsePrediction> {
    if j >= n {
        return Err(Error::Contract(format!("device index {j} out of range for {n} devices")));
    }
    let other = match situation {
        Situation::Interior => ExpectedResponse::Unchanged,
        _ => ExpectedResponse::DownOrEqual,
    };
    let per_device = (0..n).map(|i| if i == j { ExpectedResponse::Target } else { other }).collect();
    Ok(ResponsePrediction { per_device, degenerate: situation == Situation::BothActive })
}

/// Dykstra's alternating projection onto the box and the two coupling
/// half-spaces. Stops once a full sweep moves neither the iterate nor any
/// correction term by more than `tol`.
pub fn dykstra_project(v: &[f64], budget: &ResourceBudget, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let n = budget.len();
    if v.len() != n {
        return Err(Error::Contract(format!("vector has {} entries, budget has {n} devices", v.len())));
    }
    let ones = vec![1.0; n];
    let halfspaces = [(ones.as_slice(), budget.c()), (budget.a(), budget.d())];
    let gamma = budget.gamma();
    let mut x = v.to_vec();
    let mut p = vec![vec![0.0; n]; 3];
    let mut y = vec![0.0; n];
    for _ in 0..max_sweeps {
        let mut change: f64 = 0.0;
        for (k, pk) in p.iter_mut().enumerate() {
            for i in 0..n {
                y[i] = x[i] + pk[i];
            }
            let mut next = y.clone();
            if k == 0 {
                for i in 0..n {
                    next[i] = y[i].max(gamma[i]);
                }
            } else {
                let (w, b) = halfspaces[k - 1];
                let excess = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() - b;
                if excess > 0.0 {
                    let ww: f64 = w.iter().map(|w| w * w).sum();
                    for i in 0..n {
                        next[i] = y[i] - excess / ww * w[i];
                    }
                }
            }
            for i in 0..n {
                let new_p = y[i] - next[i];
                change = change.max((next[i] - x[i]).abs()).max((new_p - pk[i]).abs());
                pk[i] = new_p;
                x[i] = next[i];
            }
        }
        if change <= tol {
            return Ok(x);
        }
    }
    Err(Error::SolverFailure(format!("Dykstra projection did not settle within {max_sweeps} sweeps")))
}

/// Output of [`reference_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest componentwise distance between a multistart end point and
    /// the returned optimum.
    pub multistart_spread: f64,
    /// Set when the multistart spread exceeds `1e-4`.
    pub disagreement: bool,
}

const MULTISTARTS: usize = 20;
const MULTISTART_SEED: u64 = 0x5eed_0a11_c1e;
const DISAGREEMENT_TOL: f64 = 1e-4;
const DYKSTRA_TOL: f64 = 1e-12;
const DYKSTRA_SWEEPS: usize = 200_000;

/// Total utility `sum h_i(x_i)`.
pub fn objective(functions: &[UtilityFunction], x: &[f64]) -> Result<f64> {
    functions.iter().zip(x).map(|(f, &xi)| f.utility(xi)).sum()
}

/// Brute-force maximiser of `sum h_i(x_i)` over the feasible polytope.
///
/// Projected-gradient ascent runs from twenty random feasible starts; an
/// exact dual solve supplies the polished candidate. Whichever feasible
/// point has the larger objective is returned.
pub fn reference_solve(functions: &[UtilityFunction], budget: &ResourceBudget) -> Result<ReferenceSolution> {
    let n = budget.len();
    if functions.len() != n {
        return Err(Error::Contract(format!("{} utilities for {n} devices", functions.len())));
    }
    let polished = dual_solve(functions, budget)?;
    let mut best = polished.clone();
    let mut best_obj = objective(functions, &best)?;

    let mut rng = ChaCha8Rng::seed_from_u64(MULTISTART_SEED);
    let mut endpoints = Vec::with_capacity(MULTISTARTS);
    for _ in 0..MULTISTARTS {
        let raw: Vec<f64> = (0..n).map(|i| rng.random_range(budget.gamma()[i]..=budget.upper_bound(i))).collect();
        let start = dykstra_project(&raw, budget, DYKSTRA_TOL, DYKSTRA_SWEEPS)?;
        let end = projected_ascent(functions, budget, start)?;
        let obj = objective(functions, &end)?;
        if obj > best_obj {
            best_obj = obj;
            best = end.clone();
        }
        endpoints.push(end);
    }
    let spread = endpoints
        .iter()
        .flat_map(|e| e.iter().zip(&best).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    if spread > DISAGREEMENT_TOL {
        log::debug!("reference multistart spread {spread:.3e}");
    }
    Ok(ReferenceSolution { x: best, objective: best_obj, multistart_spread: spread, disagreement: spread > DISAGREEMENT_TOL })
}

fn projected_ascent(functions: &[UtilityFunction], budget: &ResourceBudget, mut x: Vec<f64>) -> Result<Vec<f64>> {
    const SUFFICIENT_INCREASE: f64 = 1e-4;
    let mut step: f64 = 1.0;
    let mut value = objective(functions, &x)?;
    for _ in 0..2000 {
        let grad = functions.iter().zip(&x).map(|(f, &xi)| f.marginal(xi)).collect::<Result<Vec<_>>>()?;
        // Backtrack along the projection arc, starting from a step a little
        // longer than the last accepted one so the step length can recover.
        step = (step * 2.0).min(1e3);
        let (next, next_value) = loop {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
            let cand = dykstra_project(&trial, budget, DYKSTRA_TOL, DYKSTRA_SWEEPS)?;
            let gain: f64 = grad.iter().zip(cand.iter().zip(&x)).map(|(g, (c, x))| g * (c - x)).sum();
            let cand_value = objective(functions, &cand)?;
            if cand_value >= value + SUFFICIENT_INCREASE * gain || step < 1e-14 {
                break (cand, cand_value);
            }
            step *= 0.5;
        };
        let moved = next.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        x = next;
        value = next_value;
        if moved <= 1e-11 {
            break;
        }
    }
    Ok(x)
}

/// Exact solve through the dual: for multipliers `(l1, l2)` each device
/// independently picks `x_i = argmax h_i(x) - (l1 + l2 a_i) x` on
/// `[gamma_i, U_i]`; `l1` is chosen optimally for each `l2` and `l2` by
/// bisection on the storage residual, which is monotone along that path.
fn dual_solve(functions: &[UtilityFunction], budget: &ResourceBudget) -> Result<Vec<f64>> {
    let n = budget.len();
    let a = budget.a();
    let bounds: Vec<(f64, f64)> = (0..n).map(|i| (budget.gamma()[i], budget.upper_bound(i))).collect();
    let respond = |l1: f64, l2: f64| -> Result<Vec<f64>> {
        (0..n).map(|i| best_response(&functions[i], l1 + l2 * a[i], bounds[i])).collect()
    };
    let inner = |l2: f64| -> Result<(f64, Vec<f64>)> {
        let l1 = monotone_root(|l1| Ok(respond(l1, l2)?.iter().sum::<f64>() - budget.c()))?;
        Ok((l1, respond(l1, l2)?))
    };
    let l2 = monotone_root(|l2| {
        let (_, x) = inner(l2)?;
        Ok(budget.g2(&x))
    })?;
    Ok(inner(l2)?.1)
}

/// `argmax_{x in [lo, hi]} h(x) - mu x` for concave `h`.
fn best_response(f: &UtilityFunction, mu: f64, (lo, hi): (f64, f64)) -> Result<f64> {
    if f.marginal(lo)? <= mu {
        return Ok(lo);
    }
    if f.marginal(hi)? >= mu {
        return Ok(hi);
    }
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f.marginal(mid)? > mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Smallest `t >= 0` with `g(t) <= 0` for a nonincreasing `g` that is
/// eventually nonpositive; `0` when `g(0) <= 0`.
fn monotone_root(g: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if g(0.0)? <= 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut expansions = 0;
    while g(hi)? > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 1100 {
            return Err(Error::SolverFailure("dual multiplier bracket did not close".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
