//! Shared resource budget defining the feasible polytope
//! `C = { z : sum z <= c, sum a_i z_i <= d, z_i >= gamma_i }`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-device minimum writing frequency (Hz).
pub const DEFAULT_MIN_FREQUENCY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub struct ResourceBudget {
    /// Maximum total writing frequency (Hz).
    c: f64,
    /// Storage available per packet interval (MB).
    d: f64,
    /// Per-device write size (MB).
    a: Vec<f64>,
    /// Per-device minimum frequency (Hz).
    gamma: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetRepr {
    c: f64,
    d: f64,
    a: Vec<f64>,
    #[serde(default)]
    gamma: Option<Vec<f64>>,
}

impl From<ResourceBudget> for BudgetRepr {
    fn from(b: ResourceBudget) -> Self {
        BudgetRepr { c: b.c, d: b.d, a: b.a, gamma: Some(b.gamma) }
    }
}

impl TryFrom<BudgetRepr> for ResourceBudget {
    type Error = Error;

    fn try_from(r: BudgetRepr) -> Result<Self> {
        match r.gamma {
            Some(g) => ResourceBudget::new(r.c, r.d, r.a, g),
            None => ResourceBudget::with_default_gamma(r.c, r.d, r.a),
        }
    }
}

impl ResourceBudget {
    /// Validates positivity and non-emptiness of the polytope.
    pub fn new(c: f64, d: f64, a: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if a.len() != gamma.len() {
            return Err(Error::Contract(format!(
                "write sizes ({}) and minimum frequencies ({}) differ in length",
                a.len(),
                gamma.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::InfeasibleBudget("no devices".into()));
        }
        let finite = c.is_finite() && d.is_finite() && a.iter().chain(&gamma).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InfeasibleBudget("non-finite budget entry".into()));
        }
        if c <= 0.0 || d <= 0.0 {
            return Err(Error::InfeasibleBudget(format!("c = {c} and d = {d} must be positive")));
        }
        if let Some((i, ai)) = a.iter().enumerate().find(|(_, ai)| **ai <= 0.0) {
            return Err(Error::InfeasibleBudget(format!("a[{i}] = {ai} must be positive")));
        }
        if let Some((i, gi)) = gamma.iter().enumerate().find(|(_, gi)| **gi < 0.0) {
            return Err(Error::InfeasibleBudget(format!("gamma[{i}] = {gi} must be non-negative")));
        }
        let b = ResourceBudget { c, d, a, gamma };
        let (s1, s2) = (b.min_frequency_sum(), b.min_storage_sum());
        let slack = 1e-12;
        if s1 > c * (1.0 + slack) {
            return Err(Error::InfeasibleBudget(format!("sum of minimum frequencies {s1} exceeds c = {c}")));
        }
        if s2 > d * (1.0 + slack) {
            return Err(Error::InfeasibleBudget(format!("minimum storage demand {s2} exceeds d = {d}")));
        }
        Ok(b)
    }

    pub fn with_default_gamma(c: f64, d: f64, a: Vec<f64>) -> Result<Self> {
        let gamma = vec![DEFAULT_MIN_FREQUENCY; a.len()];
        Self::new(c, d, a, gamma)
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn min_frequency_sum(&self) -> f64 {
        self.gamma.iter().sum()
    }

    pub fn min_storage_sum(&self) -> f64 {
        self.a.iter().zip(&self.gamma).map(|(a, g)| a * g).sum()
    }

    /// `g1(x) = sum x - c`
    pub fn g1(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>() - self.c
    }

    /// `g2(x) = sum a_i x_i - d`
    pub fn g2(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - self.d
    }

    /// True when every constraint holds within `tol` (scaled by the bound).
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.len()
            && self.g1(x) <= tol * self.c.max(1.0)
            && self.g2(x) <= tol * self.d.max(1.0)
            && x.iter().zip(&self.gamma).all(|(x, g)| *x >= g - tol * g.max(1.0))
    }

    /// Largest value coordinate `i` can take inside the polytope.
    pub fn upper_bound(&self, i: usize) -> f64 {
        let others_f: f64 = self.min_frequency_sum() - self.gamma[i];
        let others_s: f64 = self.min_storage_sum() - self.a[i] * self.gamma[i];
        (self.c - others_f).min((self.d - others_s) / self.a[i])
    }

    /// The polytope collapses to the single point `gamma`.
    pub fn is_degenerate(&self, tol: f64) -> bool {
        self.c - self.min_frequency_sum() <= tol * self.c.max(1.0)
            || self.d - self.min_storage_sum() <= tol * self.d.max(1.0)
    }

    pub fn with_c(&self, c: f64) -> Result<Self> {
        Self::new(c, self.d, self.a.clone(), self.gamma.clone())
    }

    pub fn with_d(&self, d: f64) -> Result<Self> {
        Self::new(self.c, d, self.a.clone(), self.gamma.clone())
    }

    pub fn with_size(&self, i: usize, a_i: f64) -> Result<Self> {
        let mut a = self.a.clone();
        a[i] = a_i;
        Self::new(self.c, self.d, a, self.gamma.clone())
    }

    /// Budget for a device set grown by one member.
    pub fn with_device(&self, a_i: f64, gamma_i: f64) -> Result<Self> {
        let mut a = self.a.clone();
        let mut gamma = self.gamma.clone();
        a.push(a_i);
        gamma.push(gamma_i);
        Self::new(self.c, self.d, a, gamma)
    }
}
