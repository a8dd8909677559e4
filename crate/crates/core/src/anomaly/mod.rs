//! Manipulation injection, labelled scenario generation, the gateway-side
//! rule detector and detection metrics.

mod detector;
mod metrics;
mod scenario;

pub use detector::{
    alarm_log, operator_resets, rule_detect, run_detector, xz_check, AlarmRecord, DetectorConfig, DetectorVerdict, RuleDetector,
    VerdictMode, STANDARD_THRESHOLDS,
};
pub use metrics::{score, two_class, window_majority, Metrics};
pub use scenario::{
    anomaly_experiment_instance, generate_scenario, networked_profile, PhaseRecord, Scenario, ScenarioEvent,
    ScenarioMode, ScenarioSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::utility::{UtilityFunction, UtilityKind};

/// Input offsets (function-type and input-only manipulations).
pub const INPUT_FACTOR_RANGE: (f64, f64) = (-3.0, 3.0);
pub const SIZE_FACTOR_RANGE: (f64, f64) = (-1.0, 1.0);
/// Offset applied to the frequency budget `c`.
pub const MWF_FACTOR_RANGE: (f64, f64) = (-3.0, 3.0);
/// Offset applied to the storage budget `d`.
pub const STORAGE_FACTOR_RANGE: (f64, f64) = (-5.0, 5.0);
/// Smallest packet size a data-size manipulation may leave behind.
pub const MIN_PACKET_SIZE: f64 = 0.1;

/// Ground-truth class of a trace row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    /// Untampered operation, including operator-driven budget changes.
    Normal = 0,
    FunctionAndInput = 1,
    DataSize = 2,
    InputOnly = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Normal, Label::FunctionAndInput, Label::DataSize, Label::InputOnly];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_anomaly(self) -> bool {
        self != Label::Normal
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::ALL.get(v as usize).copied().ok_or_else(|| format!("label must be 0..=3, got {v}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Device(usize),
    System,
}

/// One manipulation. Only the fields that belong to `label` are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulationSpec {
    pub label: Label,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mwf_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "replacement_name")]
    pub new_function: Option<UtilityKind>,
}

impl ManipulationSpec {
    fn bare(label: Label, target: Target) -> Self {
        ManipulationSpec {
            label,
            target,
            input_factor: None,
            size_factor: None,
            mwf_factor: None,
            storage_factor: None,
            new_function: None,
        }
    }

    /// Operator-side budget change; `None` leaves that budget alone.
    pub fn systemic(mwf_factor: Option<f64>, storage_factor: Option<f64>) -> Self {
        ManipulationSpec { mwf_factor, storage_factor, ..Self::bare(Label::Normal, Target::System) }
    }

    pub fn function_and_input(device: usize, new_function: UtilityKind, input_factor: f64) -> Self {
        ManipulationSpec {
            new_function: Some(new_function),
            input_factor: Some(input_factor),
            ..Self::bare(Label::FunctionAndInput, Target::Device(device))
        }
    }

    pub fn data_size(device: usize, size_factor: f64) -> Self {
        ManipulationSpec { size_factor: Some(size_factor), ..Self::bare(Label::DataSize, Target::Device(device)) }
    }

    pub fn input_only(device: usize, input_factor: f64) -> Self {
        ManipulationSpec { input_factor: Some(input_factor), ..Self::bare(Label::InputOnly, Target::Device(device)) }
    }

    /// Checks field/label consistency and factor ranges.
    pub fn validate(&self) -> Result<()> {
        let set = [
            ("input_factor", self.input_factor.is_some()),
            ("size_factor", self.size_factor.is_some()),
            ("mwf_factor", self.mwf_factor.is_some()),
            ("storage_factor", self.storage_factor.is_some()),
            ("new_function", self.new_function.is_some()),
        ];
        let (required, optional): (&[&str], &[&str]) = match self.label {
            Label::Normal => (&[], &["mwf_factor", "storage_factor"]),
            Label::FunctionAndInput => (&["input_factor", "new_function"], &[]),
            Label::DataSize => (&["size_factor"], &[]),
            Label::InputOnly => (&["input_factor"], &[]),
        };
        for (name, present) in set {
            if present && !required.contains(&name) && !optional.contains(&name) {
                return Err(Error::Contract(format!("label {} does not take {name}", self.label.as_u8())));
            }
            if !present && required.contains(&name) {
                return Err(Error::Contract(format!("label {} requires {name}", self.label.as_u8())));
            }
        }
        if self.label == Label::Normal {
            if self.target != Target::System {
                return Err(Error::Contract("systemic changes target the system, not a device".into()));
            }
            if self.mwf_factor.is_none() && self.storage_factor.is_none() {
                return Err(Error::Contract("systemic change sets neither c nor d".into()));
            }
        } else if self.target == Target::System {
            return Err(Error::Contract("device manipulations need a device target".into()));
        }
        for (name, v, (lo, hi)) in [
            ("input_factor", self.input_factor, INPUT_FACTOR_RANGE),
            ("size_factor", self.size_factor, SIZE_FACTOR_RANGE),
            ("mwf_factor", self.mwf_factor, MWF_FACTOR_RANGE),
            ("storage_factor", self.storage_factor, STORAGE_FACTOR_RANGE),
        ] {
            if let Some(v) = v {
                if !(lo..=hi).contains(&v) {
                    return Err(Error::Contract(format!("{name} = {v} outside [{lo}, {hi}]")));
                }
            }
        }
        if let Some(k) = self.new_function {
            if !UtilityKind::REPLACEMENT_SET.contains(&k) {
                return Err(Error::Contract(format!("{} is not a replacement function", k.name())));
            }
        }
        Ok(())
    }
}

/// Applies `spec` to a copy of `base`. The caller re-runs ADMM from its
/// current state against the returned problem.
///
/// A function-type manipulation whose replacement has a pole on `x >= 0`
/// fails with [`Error::Domain`]; the scenario generator redraws in that case.
pub fn inject(spec: &ManipulationSpec, base: &Instance) -> Result<Instance> {
    spec.validate()?;
    let mut out = base.clone();
    let device = match spec.target {
        Target::Device(j) if j >= base.functions.len() => {
            return Err(Error::Contract(format!("target device {j} out of range for {}", base.functions.len())));
        }
        Target::Device(j) => Some(j),
        Target::System => None,
    };
    match (spec.label, device) {
        (Label::InputOnly, Some(j)) => {
            let f = base.functions[j];
            out.functions[j] = f.with_shift(f.shift + spec.input_factor.unwrap_or(0.0));
        }
        (Label::FunctionAndInput, Some(j)) => {
            let kind = spec.new_function.expect("validated");
            let f = UtilityFunction::new(kind).with_shift(spec.input_factor.expect("validated"));
            if let Some(pole) = f.pole() {
                if pole >= 0.0 {
                    return Err(Error::Domain(format!("replacement {} has its pole at x = {pole}", kind.name())));
                }
            }
            out.functions[j] = f;
        }
        (Label::DataSize, Some(j)) => {
            let a = (base.budget.a()[j] + spec.size_factor.expect("validated")).max(MIN_PACKET_SIZE);
            out.budget = base.budget.with_size(j, a)?;
        }
        (Label::Normal, None) => {
            let c = base.budget.c() + spec.mwf_factor.unwrap_or(0.0);
            let d = base.budget.d() + spec.storage_factor.unwrap_or(0.0);
            if !(c > 0.0 && d > 0.0) {
                return Err(Error::Contract(format!("manipulated budget must stay positive, got c = {c}, d = {d}")));
            }
            out.budget = base.budget.with_c(c)?.with_d(d)?;
        }
        _ => unreachable!("validate pairs labels with targets"),
    }
    Ok(out)
}

mod replacement_name {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::utility::UtilityKind;

    pub fn serialize<S: Serializer>(k: &Option<UtilityKind>, s: S) -> Result<S::Ok, S::Error> {
        match k {
            Some(k) => s.serialize_some(k.name()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<UtilityKind>, D::Error> {
        let Some(name) = Option::<String>::deserialize(d)? else { return Ok(None) };
        UtilityKind::REPLACEMENT_SET
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .map(Some)
            .ok_or_else(|| D::Error::custom(format!("`{name}` is not a replacement function")))
    }
}
