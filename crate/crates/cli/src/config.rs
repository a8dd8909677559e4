//! Run configuration: one TOML file per experiment.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use edgefreq_core::anomaly::{DetectorConfig, Label, ScenarioSpec, VerdictMode, STANDARD_THRESHOLDS};
use edgefreq_core::budget::ResourceBudget;
use edgefreq_core::instances::Instance;
use edgefreq_core::netsim::{DeviceId, StalePolicy, TransportProfile, DEFAULT_ESTIMATION_WINDOW};
use edgefreq_core::optim::SolverConfig;
use edgefreq_core::utility::UtilityFunction;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub budget: BudgetConfig,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub transport: TransportProfile,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub campaign: CampaignConfig,
    #[serde(default)]
    pub detector: DetectorSettings,
    /// Published utility totals to print next to the computed ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_utilities: Option<ReferenceUtilities>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Total transmission frequency, Hz.
    pub c: f64,
    /// Total storage rate, MB/s.
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub utility: UtilityFunction,
    /// Packet size, MB.
    pub a: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Virtual time at which the device registers (simulate only).
    #[serde(default)]
    pub join_at_s: f64,
}

fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub duration_s: f64,
    pub handshake_rounds: usize,
    /// Defaults to 50 times the slowest configured link delay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round_timeout_ms: Option<f64>,
    pub stale_policy: StalePolicy,
    pub estimation_window: usize,
    /// Spacing of the resource-usage series.
    pub sample_every_s: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            duration_s: 600.0,
            handshake_rounds: 10,
            round_timeout_ms: None,
            stale_policy: StalePolicy::Wait,
            estimation_window: DEFAULT_ESTIMATION_WINDOW,
            sample_every_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignMode {
    /// Lock-step rounds in process.
    #[default]
    InProcess,
    /// Rounds over the simulated delayed network.
    Networked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub mode: CampaignMode,
    pub labels: Vec<Label>,
    pub target: usize,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    pub normal_len: (u64, u64),
    pub anomalous_len: (u64, u64),
    pub remediate: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        let spec = ScenarioSpec::default();
        CampaignConfig {
            seed: 0,
            mode: CampaignMode::default(),
            labels: spec.labels,
            target: spec.target,
            train_len: 3600,
            val_len: 1800,
            test_len: 3600,
            normal_len: spec.normal_len,
            anomalous_len: spec.anomalous_len,
            remediate: spec.remediate,
        }
    }
}

impl CampaignConfig {
    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            labels: self.labels.clone(),
            target: self.target,
            normal_len: self.normal_len,
            anomalous_len: self.anomalous_len,
            remediate: self.remediate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub thresholds: Vec<f64>,
    pub mode: VerdictMode,
    pub stability_tol: f64,
    pub baseline_window: usize,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        let d = DetectorConfig::default();
        DetectorSettings {
            thresholds: STANDARD_THRESHOLDS.to_vec(),
            mode: d.mode,
            stability_tol: d.stability_tol,
            baseline_window: d.baseline_window,
        }
    }
}

impl DetectorSettings {
    pub fn at(&self, threshold: f64) -> DetectorConfig {
        DetectorConfig {
            threshold,
            mode: self.mode,
            stability_tol: self.stability_tol,
            baseline_window: self.baseline_window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceUtilities {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportional: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// Checks every cross-field and module invariant.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: edgefreq_core::error::Error| CliError::Config(e.to_string());
        if self.devices.is_empty() {
            return Err(CliError::Config("at least one device is required".into()));
        }
        let ids: BTreeSet<DeviceId> = self.devices.iter().map(|d| d.id).collect();
        if ids.len() != self.devices.len() {
            return Err(CliError::Config("device ids must be unique".into()));
        }
        for d in &self.devices {
            if !(d.join_at_s >= 0.0 && d.join_at_s.is_finite()) {
                return Err(CliError::Config(format!("device {}: join_at_s must be a finite time >= 0", d.id)));
            }
            if let Some(pole) = d.utility.pole() {
                if pole >= 0.0 {
                    return Err(CliError::Config(format!("device {}: utility has a pole at x = {pole}", d.id)));
                }
            }
        }
        self.budget_all().map_err(bad)?;
        self.solver.validate().map_err(bad)?;
        self.transport.validate().map_err(bad)?;
        if !self.devices.iter().any(|d| d.join_at_s == 0.0) {
            return Err(CliError::Config("at least one device must join at time 0".into()));
        }
        let s = &self.simulate;
        if !(s.duration_s > 0.0 && s.sample_every_s > 0.0) {
            return Err(CliError::Config("simulate durations must be positive".into()));
        }
        if s.handshake_rounds == 0 || s.estimation_window < 2 {
            return Err(CliError::Config("handshake_rounds >= 1 and estimation_window >= 2 required".into()));
        }
        if let Some(t) = s.round_timeout_ms {
            if !(t > 0.0) {
                return Err(CliError::Config("round_timeout_ms must be positive".into()));
            }
        }
        self.campaign.scenario_spec().validate(self.devices.len()).map_err(bad)?;
        if self.campaign.train_len == 0 || self.campaign.val_len == 0 || self.campaign.test_len == 0 {
            return Err(CliError::Config("campaign split lengths must be positive".into()));
        }
        if self.detector.thresholds.is_empty() {
            return Err(CliError::Config("at least one detector threshold is required".into()));
        }
        for t in &self.detector.thresholds {
            self.detector.at(*t).validate().map_err(bad)?;
        }
        Ok(())
    }

    /// Budget over every configured device, in configuration order.
    pub fn budget_all(&self) -> edgefreq_core::error::Result<ResourceBudget> {
        ResourceBudget::new(
            self.budget.c,
            self.budget.d,
            self.devices.iter().map(|d| d.a).collect(),
            self.devices.iter().map(|d| d.gamma).collect(),
        )
    }

    /// The optimisation problem over every configured device.
    pub fn instance(&self) -> edgefreq_core::error::Result<Instance> {
        Ok(Instance { functions: self.devices.iter().map(|d| d.utility).collect(), budget: self.budget_all()? })
    }

    pub fn functions(&self) -> Vec<UtilityFunction> {
        self.devices.iter().map(|d| d.utility).collect()
    }
}
