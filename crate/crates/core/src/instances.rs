//! Seeded generators of random allocation problems, shared by property tests,
//! acceptance checks and benchmarks.

use rand::Rng;

use crate::budget::ResourceBudget;
use crate::utility::UtilityFunction;

/// A strictly concave allocation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub functions: Vec<UtilityFunction>,
    pub budget: ResourceBudget,
}

/// One strictly concave utility whose unconstrained maximiser lies in
/// roughly `[0.5, 8]`, drawn from the three untampered families.
pub fn random_concave_utility<R: Rng + ?Sized>(rng: &mut R) -> UtilityFunction {
    match rng.random_range(0..3) {
        0 => UtilityFunction::neg_quad(rng.random_range(-8.0..-1.0), rng.random_range(0.0..100.0)),
        1 => UtilityFunction::neg_quad_cubic(
            rng.random_range(-9.0..-2.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.0..100.0),
        ),
        _ => UtilityFunction::scaled_neg_quad_cubic(
            rng.random_range(0.5..2.0),
            rng.random_range(-8.0..-1.0),
            rng.random_range(0.0..100.0),
        ),
    }
}

/// Random feasible budget for `n` devices. The slack above the minimum
/// demand is sized so that every activity pattern of the couplings shows up.
pub fn random_budget<R: Rng + ?Sized>(rng: &mut R, n: usize) -> ResourceBudget {
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
    let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let sg: f64 = gamma.iter().sum();
    let sag: f64 = a.iter().zip(&gamma).map(|(a, g)| a * g).sum();
    let c = sg + rng.random_range(0.5..12.0);
    let d = sag + rng.random_range(1.0..40.0);
    ResourceBudget::new(c, d, a, gamma).expect("generated budget is feasible by construction")
}

/// Instance with `1..=max_n` devices.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_n: usize) -> Instance {
    let n = rng.random_range(1..=max_n);
    let functions = (0..n).map(|_| random_concave_utility(rng)).collect();
    Instance { functions, budget: random_budget(rng, n) }
}
