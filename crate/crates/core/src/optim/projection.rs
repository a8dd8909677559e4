//! Euclidean projection onto the feasible polytope.
//!
//! The KKT system of `min ||z - v||^2` over `C` gives
//! `z_i = max(gamma_i, v_i - lambda1 - lambda2 * a_i)` with multipliers
//! `lambda1, lambda2 >= 0` for the two coupling constraints. The four
//! activity patterns of `(lambda1, lambda2)` are tried in order; the first
//! pattern with nonnegative multipliers whose slack constraints hold is the
//! projection. Single-multiplier patterns are solved exactly by a sorted
//! breakpoint walk; the two-multiplier pattern nests that walk inside a
//! monotone bisection on `lambda2` and is then polished by solving the 2x2
//! linear system on the identified free set.

use crate::budget::ResourceBudget;
use crate::error::{Error, Result};

use super::SolverConfig;

/// Projection output together with the multipliers that certify it.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub z: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `Pi_C(v)`.
pub fn project_onto_feasible(v: &[f64], budget: &ResourceBudget, cfg: &SolverConfig) -> Result<Vec<f64>> {
    project_with_multipliers(v, budget, cfg).map(|p| p.z)
}

pub fn project_with_multipliers(
    v: &[f64],
    budget: &ResourceBudget,
    cfg: &SolverConfig,
) -> Result<Projection> {
    let n = budget.len();
    if v.len() != n {
        return Err(Error::Contract(format!("projection input has {} entries, budget has {n}", v.len())));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("non-finite projection input {bad}")));
    }
    let gamma = budget.gamma();
    let a = budget.a();
    let (c, d) = (budget.c(), budget.d());
    let tol = cfg.projection_tol;
    let tol_c = tol * c.max(1.0);
    let tol_d = tol * d.max(1.0);
    let tol_lambda = tol * v.iter().fold(1.0_f64, |m, x| m.max(x.abs()));

    if budget.is_degenerate(tol) {
        return Ok(Projection { z: gamma.to_vec(), lambda1: 0.0, lambda2: 0.0 });
    }

    let ones = vec![1.0; n];
    let clamp = |l1: f64, l2: f64| -> Vec<f64> {
        v.iter()
            .zip(a)
            .zip(gamma)
            .map(|((vi, ai), gi)| (vi - l1 - l2 * ai).max(*gi))
            .collect()
    };

    // Neither coupling constraint binds.
    let z = clamp(0.0, 0.0);
    if budget.g1(&z) <= tol_c && budget.g2(&z) <= tol_d {
        return Ok(Projection { z, lambda1: 0.0, lambda2: 0.0 });
    }

    // Only the frequency cap binds.
    if let Some(l1) = solve_single_multiplier(v, &ones, gamma, c) {
        if l1 >= -tol_lambda {
            let l1 = l1.max(0.0);
            let z = clamp(l1, 0.0);
            if budget.g2(&z) <= tol_d {
                return Ok(Projection { z, lambda1: l1, lambda2: 0.0 });
            }
        }
    }

    // Only the storage budget binds.
    if let Some(l2) = solve_single_multiplier(v, a, gamma, d) {
        if l2 >= -tol_lambda {
            let l2 = l2.max(0.0);
            let z = clamp(0.0, l2);
            if budget.g1(&z) <= tol_c {
                return Ok(Projection { z, lambda1: 0.0, lambda2: l2 });
            }
        }
    }

    // Both bind.
    if let Some((l1, l2)) = solve_double_multiplier(v, a, gamma, c, d) {
        if l1 >= -tol_lambda && l2 >= -tol_lambda {
            return Ok(Projection { z: clamp(l1.max(0.0), l2.max(0.0)), lambda1: l1.max(0.0), lambda2: l2.max(0.0) });
        }
    }

    Err(Error::SolverFailure(format!("no activity pattern certified the projection of {v:?}")))
}

/// Solves `sum w_i max(gamma_i, v_i - lambda w_i) = target` for `lambda` over
/// the whole real line. The left side is continuous, piecewise linear and
/// nonincreasing, so a root exists iff `target > sum w_i gamma_i`.
pub(crate) fn solve_single_multiplier(v: &[f64], w: &[f64], gamma: &[f64], target: f64) -> Option<f64> {
    let floor: f64 = w.iter().zip(gamma).map(|(w, g)| w * g).sum();
    if target <= floor {
        return None;
    }
    // Coordinate i is free (above its bound) iff lambda < breakpoint_i.
    let mut order: Vec<(f64, usize)> = v
        .iter()
        .zip(w)
        .zip(gamma)
        .enumerate()
        .map(|(i, ((v, w), g))| ((v - g) / w, i))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));

    let mut free_wv = 0.0;
    let mut free_ww = 0.0;
    let mut clamped_wg = floor;
    for k in 0..order.len() {
        let i = order[k].1;
        free_wv += w[i] * v[i];
        free_ww += w[i] * w[i];
        clamped_wg -= w[i] * gamma[i];
        let lambda = (free_wv + clamped_wg - target) / free_ww;
        let upper = order[k].0;
        let lower = order.get(k + 1).map_or(f64::NEG_INFINITY, |b| b.0);
        if lambda <= upper && lambda >= lower {
            return Some(lambda);
        }
    }
    // Rounding pushed the root just outside every segment; the last segment
    // (all coordinates free) is unbounded below, so fall back to the
    // segment whose interval is closest.
    let lambda = (free_wv - target) / free_ww;
    Some(lambda.min(order[0].0))
}

/// Solves both coupling equalities simultaneously. `lambda1` is eliminated
/// exactly for each trial `lambda2`; the resulting storage residual is
/// nonincreasing in `lambda2` (it is the derivative of a concave partial
/// dual), so bisection applies.
fn solve_double_multiplier(v: &[f64], a: &[f64], gamma: &[f64], c: f64, d: f64) -> Option<(f64, f64)> {
    let n = v.len();
    let ones = vec![1.0; n];
    let mut shifted = vec![0.0; n];
    let mut eval = |l2: f64| -> Option<(f64, f64)> {
        for i in 0..n {
            shifted[i] = v[i] - l2 * a[i];
        }
        let l1 = solve_single_multiplier(&shifted, &ones, gamma, c)?;
        let r2: f64 = (0..n).map(|i| a[i] * (shifted[i] - l1).max(gamma[i])).sum::<f64>() - d;
        Some((l1, r2))
    };

    let scale = v.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let (mut lo, mut hi) = (-scale, scale);
    let mut grow = 0;
    while eval(lo)?.1 < 0.0 {
        lo *= 2.0;
        grow += 1;
        if grow > 200 {
            return None;
        }
    }
    grow = 0;
    while eval(hi)?.1 > 0.0 {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eval(mid)?.1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l2 = 0.5 * (lo + hi);
    let (l1, _) = eval(l2)?;
    Some(polish_double(v, a, gamma, c, d, l1, l2).unwrap_or((l1, l2)))
}

/// Exact solve of the 2x2 system on the free set implied by `(l1, l2)`,
/// accepted only if it reproduces the same free set.
fn polish_double(v: &[f64], a: &[f64], gamma: &[f64], c: f64, d: f64, l1: f64, l2: f64) -> Option<(f64, f64)> {
    let free: Vec<bool> = (0..v.len()).map(|i| v[i] - l1 - l2 * a[i] > gamma[i]).collect();
    let (mut k, mut sa, mut saa, mut sv, mut sav, mut rc, mut rd) = (0.0, 0.0, 0.0, 0.0, 0.0, c, d);
    for i in 0..v.len() {
        if free[i] {
            k += 1.0;
            sa += a[i];
            saa += a[i] * a[i];
            sv += v[i];
            sav += a[i] * v[i];
        } else {
            rc -= gamma[i];
            rd -= a[i] * gamma[i];
        }
    }
    // k*l1 + sa*l2 = sv - rc ;  sa*l1 + saa*l2 = sav - rd
    let det = k * saa - sa * sa;
    if det.abs() <= 1e-12 * (k * saa).max(1.0) {
        return None;
    }
    let b1 = sv - rc;
    let b2 = sav - rd;
    let p1 = (b1 * saa - sa * b2) / det;
    let p2 = (k * b2 - sa * b1) / det;
    let consistent = (0..v.len()).all(|i| {
        let t = v[i] - p1 - p2 * a[i];
        if free[i] {
            t >= gamma[i]
        } else {
            t <= gamma[i]
        }
    });
    consistent.then_some((p1, p2))
}
