//! Device utility functions.
//!
//! Every device owns a private concave utility `h(x)` of its transmission
//! frequency `x` (Hz). The optimisation kernels work with it in two forms:
//! the utility form `h` that devices maximise, and the convex cost form
//! `f = -h` used by the KKT analysis. The last four families are the
//! replacement set an attacker can swap in when tampering with a device.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centre of the replacement-set families.
const SET_CENTER: f64 = 9.0;

/// Which sign convention a caller wants back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    /// The utility `h`, to be maximised.
    Utility,
    /// The convex cost `f = -h`, to be minimised.
    Cost,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityKind {
    /// `h(x) = -(x + p)^2 - q x^3 + r`
    NegQuadCubic { p: f64, q: f64, r: f64 },
    /// `h(x) = -(x + p)^2 + r`
    NegQuad { p: f64, r: f64 },
    /// `h(x) = -(s x + p)^2 - x^3 + r`
    ScaledNegQuadCubic { s: f64, p: f64, r: f64 },
    /// cost `f(x) = (x - 9)^2 + x^3`
    ConvexQuadCubic,
    /// cost `f(x) = exp(x - 9)`
    Exp,
    /// cost `f(x) = 1 / (x - 9)`; pole at 9.
    Reciprocal,
    /// cost `f(x) = ln(1 + exp(x - 9))`
    Softplus,
}

impl UtilityKind {
    /// Members of the replacement set used by function-type manipulations.
    pub const REPLACEMENT_SET: [UtilityKind; 4] = [
        UtilityKind::ConvexQuadCubic,
        UtilityKind::Exp,
        UtilityKind::Reciprocal,
        UtilityKind::Softplus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            UtilityKind::NegQuadCubic { .. } => "neg_quad_cubic",
            UtilityKind::NegQuad { .. } => "neg_quad",
            UtilityKind::ScaledNegQuadCubic { .. } => "scaled_neg_quad_cubic",
            UtilityKind::ConvexQuadCubic => "convex_quad_cubic",
            UtilityKind::Exp => "exp",
            UtilityKind::Reciprocal => "reciprocal",
            UtilityKind::Softplus => "softplus",
        }
    }
}

/// A utility family plus an additive input offset.
///
/// The offset is zero for an untampered device; input manipulations set it,
/// so `h_shifted(x) = h(x + shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UtilityRepr", into = "UtilityRepr")]
pub struct UtilityFunction {
    pub kind: UtilityKind,
    pub shift: f64,
}

/// Flat on-disk representation: `{ kind = "neg_quad", p = -4, r = 500 }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<f64>,
}

impl From<UtilityFunction> for UtilityRepr {
    fn from(f: UtilityFunction) -> Self {
        let mut repr = UtilityRepr {
            kind: f.kind.name().to_string(),
            s: None,
            p: None,
            q: None,
            r: None,
            shift: (f.shift != 0.0).then_some(f.shift),
        };
        match f.kind {
            UtilityKind::NegQuadCubic { p, q, r } => {
                (repr.p, repr.q, repr.r) = (Some(p), Some(q), Some(r));
            }
            UtilityKind::NegQuad { p, r } => (repr.p, repr.r) = (Some(p), Some(r)),
            UtilityKind::ScaledNegQuadCubic { s, p, r } => {
                (repr.s, repr.p, repr.r) = (Some(s), Some(p), Some(r));
            }
            _ => {}
        }
        repr
    }
}

impl TryFrom<UtilityRepr> for UtilityFunction {
    type Error = String;

    fn try_from(repr: UtilityRepr) -> std::result::Result<Self, String> {
        let need = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| format!("utility kind `{}` requires parameter `{name}`", repr.kind))
        };
        let allowed: &[&str] = match repr.kind.as_str() {
            "neg_quad_cubic" => &["p", "q", "r"],
            "neg_quad" => &["p", "r"],
            "scaled_neg_quad_cubic" => &["s", "p", "r"],
            "convex_quad_cubic" | "exp" | "reciprocal" | "softplus" => &[],
            other => return Err(format!("unknown utility kind `{other}`")),
        };
        for (name, v) in [("s", repr.s), ("p", repr.p), ("q", repr.q), ("r", repr.r)] {
            if v.is_some() && !allowed.contains(&name) {
                return Err(format!("utility kind `{}` does not take `{name}`", repr.kind));
            }
        }
        let kind = match repr.kind.as_str() {
            "neg_quad_cubic" => UtilityKind::NegQuadCubic {
                p: need("p", repr.p)?,
                q: need("q", repr.q)?,
                r: need("r", repr.r)?,
            },
            "neg_quad" => UtilityKind::NegQuad { p: need("p", repr.p)?, r: need("r", repr.r)? },
            "scaled_neg_quad_cubic" => UtilityKind::ScaledNegQuadCubic {
                s: need("s", repr.s)?,
                p: need("p", repr.p)?,
                r: need("r", repr.r)?,
            },
            "convex_quad_cubic" => UtilityKind::ConvexQuadCubic,
            "exp" => UtilityKind::Exp,
            "reciprocal" => UtilityKind::Reciprocal,
            _ => UtilityKind::Softplus,
        };
        Ok(UtilityFunction { kind, shift: repr.shift.unwrap_or(0.0) })
    }
}

impl From<UtilityKind> for UtilityFunction {
    fn from(kind: UtilityKind) -> Self {
        UtilityFunction { kind, shift: 0.0 }
    }
}

impl UtilityFunction {
    pub fn new(kind: UtilityKind) -> Self {
        kind.into()
    }

    pub fn neg_quad_cubic(p: f64, q: f64, r: f64) -> Self {
        UtilityKind::NegQuadCubic { p, q, r }.into()
    }

    pub fn neg_quad(p: f64, r: f64) -> Self {
        UtilityKind::NegQuad { p, r }.into()
    }

    pub fn scaled_neg_quad_cubic(s: f64, p: f64, r: f64) -> Self {
        UtilityKind::ScaledNegQuadCubic { s, p, r }.into()
    }

    /// Same family with the input offset replaced.
    pub fn with_shift(self, shift: f64) -> Self {
        UtilityFunction { shift, ..self }
    }

    /// Pole of the function in `x` coordinates, if the family has one.
    pub fn pole(&self) -> Option<f64> {
        match self.kind {
            UtilityKind::Reciprocal => Some(SET_CENTER - self.shift),
            _ => None,
        }
    }

    fn check_domain(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("non-finite input {x}")));
        }
        let t = x + self.shift;
        if matches!(self.kind, UtilityKind::Reciprocal) && t == SET_CENTER {
            return Err(Error::Domain(format!(
                "reciprocal utility evaluated at its pole (x = {x}, shift = {})",
                self.shift
            )));
        }
        Ok(t)
    }

    /// `h(x + shift)` or `f(x + shift)` depending on `form`.
    pub fn eval(&self, x: f64, form: Form) -> Result<f64> {
        let t = self.check_domain(x)?;
        let h = match self.kind {
            UtilityKind::NegQuadCubic { p, q, r } => -(t + p).powi(2) - q * t.powi(3) + r,
            UtilityKind::NegQuad { p, r } => -(t + p).powi(2) + r,
            UtilityKind::ScaledNegQuadCubic { s, p, r } => -(s * t + p).powi(2) - t.powi(3) + r,
            UtilityKind::ConvexQuadCubic => -((t - SET_CENTER).powi(2) + t.powi(3)),
            UtilityKind::Exp => -(t - SET_CENTER).exp(),
            UtilityKind::Reciprocal => -1.0 / (t - SET_CENTER),
            UtilityKind::Softplus => -softplus(t - SET_CENTER),
        };
        Ok(orient(h, form))
    }

    /// Utility value `h(x + shift)`.
    pub fn utility(&self, x: f64) -> Result<f64> {
        self.eval(x, Form::Utility)
    }

    /// First derivative in the requested form.
    pub fn derivative(&self, x: f64, form: Form) -> Result<f64> {
        let t = self.check_domain(x)?;
        let dh = match self.kind {
            UtilityKind::NegQuadCubic { p, q, .. } => -2.0 * (t + p) - 3.0 * q * t * t,
            UtilityKind::NegQuad { p, .. } => -2.0 * (t + p),
            UtilityKind::ScaledNegQuadCubic { s, p, .. } => -2.0 * s * (s * t + p) - 3.0 * t * t,
            UtilityKind::ConvexQuadCubic => -(2.0 * (t - SET_CENTER) + 3.0 * t * t),
            UtilityKind::Exp => -(t - SET_CENTER).exp(),
            UtilityKind::Reciprocal => 1.0 / (t - SET_CENTER).powi(2),
            UtilityKind::Softplus => -logistic(t - SET_CENTER),
        };
        Ok(orient(dh, form))
    }

    /// Marginal utility `h'(x + shift)`.
    pub fn marginal(&self, x: f64) -> Result<f64> {
        self.derivative(x, Form::Utility)
    }

    /// Second derivative in the requested form.
    pub fn second_derivative(&self, x: f64, form: Form) -> Result<f64> {
        let t = self.check_domain(x)?;
        let d2h = match self.kind {
            UtilityKind::NegQuadCubic { q, .. } => -2.0 - 6.0 * q * t,
            UtilityKind::NegQuad { .. } => -2.0,
            UtilityKind::ScaledNegQuadCubic { s, .. } => -2.0 * s * s - 6.0 * t,
            UtilityKind::ConvexQuadCubic => -(2.0 + 6.0 * t),
            UtilityKind::Exp => -(t - SET_CENTER).exp(),
            UtilityKind::Reciprocal => -2.0 / (t - SET_CENTER).powi(3),
            UtilityKind::Softplus => {
                let s = logistic(t - SET_CENTER);
                -s * (1.0 - s)
            }
        };
        Ok(orient(d2h, form))
    }
}

fn orient(v: f64, form: Form) -> f64 {
    match form {
        Form::Utility => v,
        Form::Cost => -v,
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Reference utility sets used throughout the experiments and tests.
pub mod presets {
    use super::UtilityFunction;

    /// Allocation experiment utilities, devices 1..=3.
    pub fn allocation_set() -> [UtilityFunction; 3] {
        [
            UtilityFunction::neg_quad_cubic(9.0, 1.0, 900.0),
            UtilityFunction::neg_quad(-4.0, 500.0),
            UtilityFunction::scaled_neg_quad_cubic(2.0, 3.0, 110.0),
        ]
    }

    /// Anomaly experiment utilities, devices 1..=3 (given in cost form
    /// `(x-9)^2 + x^3`, `(x-4)^2`, `(2x-6)^2 + x^3`).
    pub fn anomaly_set() -> [UtilityFunction; 3] {
        [
            UtilityFunction::neg_quad_cubic(-9.0, 1.0, 0.0),
            UtilityFunction::neg_quad(-4.0, 0.0),
            UtilityFunction::scaled_neg_quad_cubic(2.0, -6.0, 0.0),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn all_kinds() -> Vec<UtilityFunction> {
        let mut v: Vec<UtilityFunction> = presets::allocation_set().to_vec();
        v.extend(presets::anomaly_set());
        v.extend(UtilityKind::REPLACEMENT_SET.iter().map(|k| UtilityFunction::new(*k)));
        v
    }

    #[test]
    fn allocation_values() {
        let [f1, f2, f3] = presets::allocation_set();
        assert_eq!(f3.utility(5.0).unwrap(), -184.0);
        assert_eq!(f2.utility(4.0).unwrap(), 500.0);
        assert_eq!(f1.utility(2.0).unwrap(), 771.0);
        assert_eq!(f1.eval(2.0, Form::Cost).unwrap(), -771.0);
    }

    #[test]
    fn derivative_examples() {
        let [f1, f2, _] = presets::allocation_set();
        assert_eq!(f2.marginal(4.0).unwrap(), 0.0);
        assert_eq!(f1.marginal(1.0).unwrap(), -23.0);
        let sp = UtilityFunction::new(UtilityKind::Softplus);
        assert_relative_eq!(sp.derivative(9.0, Form::Cost).unwrap(), 0.5);
    }

    #[test]
    fn shift_moves_the_argument() {
        let f = presets::allocation_set()[1].with_shift(-2.0);
        // vertex moves from 4 to 6
        assert_eq!(f.marginal(6.0).unwrap(), 0.0);
        assert_eq!(f.utility(6.0).unwrap(), 500.0);
    }

    #[test]
    fn reciprocal_pole_is_a_domain_error() {
        let f = UtilityFunction::new(UtilityKind::Reciprocal);
        assert!(matches!(f.utility(9.0), Err(Error::Domain(_))));
        assert!(matches!(f.marginal(9.0), Err(Error::Domain(_))));
        let g = f.with_shift(1.5);
        assert_eq!(g.pole(), Some(7.5));
        assert!(g.utility(7.5).is_err());
        assert!(g.utility(7.0).is_ok());
    }

    #[test]
    fn softplus_is_stable_far_from_center() {
        let f = UtilityFunction::new(UtilityKind::Softplus);
        assert_relative_eq!(f.eval(1000.0, Form::Cost).unwrap(), 991.0);
        assert!(f.eval(-1000.0, Form::Cost).unwrap() >= 0.0);
        assert_relative_eq!(f.derivative(1000.0, Form::Cost).unwrap(), 1.0);
    }

    #[test]
    fn untampered_families_are_strictly_concave_on_nonnegative_axis() {
        let mut fs = presets::allocation_set().to_vec();
        fs.extend(presets::anomaly_set());
        for f in fs {
            for k in 0..=200 {
                let x = k as f64 * 0.1;
                assert!(f.second_derivative(x, Form::Utility).unwrap() < 0.0, "{f:?} at {x}");
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for f in all_kinds() {
            for k in 0..20 {
                let x = 0.25 + k as f64 * 0.4;
                if let Some(p) = f.pole() {
                    if (x - p).abs() < 0.1 {
                        continue;
                    }
                }
                for form in [Form::Utility, Form::Cost] {
                    let fd = (f.eval(x + h, form).unwrap() - f.eval(x - h, form).unwrap()) / (2.0 * h);
                    let an = f.derivative(x, form).unwrap();
                    let scale = an.abs().max(1.0);
                    assert!((fd - an).abs() / scale <= 1e-6, "{f:?} x={x}: fd={fd} an={an}");

                    let fd2 = (f.derivative(x + h, form).unwrap() - f.derivative(x - h, form).unwrap())
                        / (2.0 * h);
                    let an2 = f.second_derivative(x, form).unwrap();
                    assert!((fd2 - an2).abs() / an2.abs().max(1.0) <= 1e-6, "{f:?} x={x}");
                }
            }
        }
    }

    #[test]
    fn serde_uses_tagged_kind() {
        let f = presets::allocation_set()[0].with_shift(0.5);
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"kind":"neg_quad_cubic","p":9.0,"q":1.0,"r":900.0,"shift":0.5}"#);
        let back: UtilityFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        let plain: UtilityFunction = serde_json::from_str(r#"{"kind":"exp"}"#).unwrap();
        assert_eq!(plain, UtilityFunction::new(UtilityKind::Exp));
        assert!(serde_json::from_str::<UtilityFunction>(r#"{"kind":"exp","p":1}"#).is_err());
        assert!(serde_json::from_str::<UtilityFunction>(r#"{"kind":"neg_quad","p":1}"#).is_err());
        assert!(serde_json::from_str::<UtilityFunction>(r#"{"kind":"cubic"}"#).is_err());
        assert!(serde_json::from_str::<UtilityFunction>(r#"{"kind":"exp","extra":1}"#).is_err());
    }
}
