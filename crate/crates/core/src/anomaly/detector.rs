use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{IterationTrace, Phase};

/// Threshold sweep used for the rule-detector accuracy tables.
pub const STANDARD_THRESHOLDS: [f64; 6] = [0.01, 0.05, 0.10, 0.15, 0.30, 0.50];

/// How per-device alarms become a two-class verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMode {
    /// Any alarmed device flags the iteration.
    AnyAlarm,
    /// Reads the shape of the response. A single device moving, or devices
    /// moving in opposite directions, is a manipulation. Every alarmed
    /// device moving the same way is what a budget change looks like, so it
    /// counts as normal.
    #[default]
    ResponsePattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Alarm when `|z - z_normal| > threshold * max(z_normal, gamma)`.
    pub threshold: f64,
    pub mode: VerdictMode,
    /// Relative per-iteration change below which `z` counts as settled.
    pub stability_tol: f64,
    /// Number of settled iterations averaged into a baseline.
    pub baseline_window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { threshold: 0.10, mode: VerdictMode::default(), stability_tol: 1e-3, baseline_window: 20 }
    }
}

impl DetectorConfig {
    pub fn with_threshold(self, threshold: f64) -> Self {
        DetectorConfig { threshold, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!("threshold must be a positive fraction, got {}", self.threshold)));
        }
        if !(self.stability_tol > 0.0) {
            return Err(Error::InvalidConfig("stability_tol must be positive".into()));
        }
        if self.baseline_window == 0 {
            return Err(Error::InvalidConfig("baseline_window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub iteration: u64,
    pub alarms: Vec<bool>,
    /// Signed deviation from the baseline as a fraction of the scale.
    pub deviation: Vec<f64>,
    /// Two-class prediction: 0 normal, 1 anomalous.
    pub predicted: u8,
    pub threshold: f64,
}

/// One line of the alarm log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub iteration: u64,
    pub device: usize,
    pub threshold: f64,
    pub deviation: f64,
}

/// Streaming z-deviation detector with automatic baselining.
///
/// Until a baseline exists every verdict is normal. A baseline is the mean
/// of the last `baseline_window` consecutive settled iterations. After
/// [`RuleDetector::request_rebaseline`] the old baseline stays in force until
/// a fresh settled window has been collected.
#[derive(Debug, Clone)]
pub struct RuleDetector {
    cfg: DetectorConfig,
    gamma: Vec<f64>,
    baseline: Option<Vec<f64>>,
    rebaseline: bool,
    settled: VecDeque<Vec<f64>>,
    prev: Option<Vec<f64>>,
}

impl RuleDetector {
    pub fn new(cfg: DetectorConfig, gamma: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        Ok(RuleDetector { cfg, gamma, baseline: None, rebaseline: false, settled: VecDeque::new(), prev: None })
    }

    /// Starts with a known baseline instead of learning one.
    pub fn with_baseline(mut self, z_normal: Vec<f64>) -> Result<Self> {
        if z_normal.len() != self.gamma.len() {
            return Err(Error::Contract(format!("baseline has {} entries for {} devices", z_normal.len(), self.gamma.len())));
        }
        self.baseline = Some(z_normal);
        Ok(self)
    }

    pub fn baseline(&self) -> Option<&[f64]> {
        self.baseline.as_deref()
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Re-learn the baseline once the stream settles again (after a
    /// remediation or an operator budget change).
    pub fn request_rebaseline(&mut self) {
        self.rebaseline = true;
        self.settled.clear();
    }

    pub fn observe(&mut self, iteration: u64, z: &[f64]) -> Result<DetectorVerdict> {
        let n = self.gamma.len();
        if z.len() != n {
            return Err(Error::Contract(format!("z has {} entries for {n} devices", z.len())));
        }
        let settled = self.prev.as_ref().is_some_and(|p| {
            z.iter().zip(p).all(|(z, p)| (z - p).abs() / p.abs().max(1.0) <= self.cfg.stability_tol)
        });
        if settled {
            self.settled.push_back(z.to_vec());
            if self.settled.len() > self.cfg.baseline_window {
                self.settled.pop_front();
            }
        } else {
            self.settled.clear();
        }
        self.prev = Some(z.to_vec());
        if (self.baseline.is_none() || self.rebaseline) && self.settled.len() >= self.cfg.baseline_window {
            let w = self.settled.len() as f64;
            self.baseline = Some((0..n).map(|i| self.settled.iter().map(|s| s[i]).sum::<f64>() / w).collect());
            self.rebaseline = false;
        }
        Ok(match &self.baseline {
            None => DetectorVerdict {
                iteration,
                alarms: vec![false; n],
                deviation: vec![0.0; n],
                predicted: 0,
                threshold: self.cfg.threshold,
            },
            Some(base) => judge(iteration, z, base, &self.gamma, &self.cfg),
        })
    }
}

fn judge(iteration: u64, z: &[f64], base: &[f64], gamma: &[f64], cfg: &DetectorConfig) -> DetectorVerdict {
    let deviation: Vec<f64> =
        z.iter().zip(base).zip(gamma).map(|((z, b), g)| (z - b) / b.max(*g).max(f64::MIN_POSITIVE)).collect();
    let alarms: Vec<bool> = deviation.iter().map(|d| d.abs() > cfg.threshold).collect();
    let count = alarms.iter().filter(|a| **a).count();
    let anomalous = match cfg.mode {
        VerdictMode::AnyAlarm => count > 0,
        VerdictMode::ResponsePattern => {
            let up = deviation.iter().zip(&alarms).any(|(d, a)| *a && *d > 0.0);
            let down = deviation.iter().zip(&alarms).any(|(d, a)| *a && *d < 0.0);
            count == 1 || (up && down)
        }
    };
    DetectorVerdict { iteration, alarms, deviation, predicted: anomalous as u8, threshold: cfg.threshold }
}

/// Fixed-baseline detection over a recorded `z` stream. Rows are numbered
/// from 0.
pub fn rule_detect(
    z_stream: &[Vec<f64>],
    z_normal: &[f64],
    gamma: &[f64],
    threshold: f64,
    mode: VerdictMode,
) -> Result<Vec<DetectorVerdict>> {
    let cfg = DetectorConfig { threshold, mode, ..Default::default() };
    cfg.validate()?;
    if z_normal.len() != gamma.len() {
        return Err(Error::Contract("baseline and gamma differ in length".into()));
    }
    z_stream
        .iter()
        .enumerate()
        .map(|(t, z)| {
            if z.len() != gamma.len() {
                return Err(Error::Contract(format!("row {t} has {} entries for {} devices", z.len(), gamma.len())));
            }
            Ok(judge(t as u64, z, z_normal, gamma, &cfg))
        })
        .collect()
}

/// Streams a trace through a learning detector. `resets` lists the
/// iterations at which the operator remedied a manipulation or changed the
/// budget; the detector re-baselines from each of them.
pub fn run_detector(trace: &IterationTrace, resets: &[u64], cfg: &DetectorConfig) -> Result<Vec<DetectorVerdict>> {
    let mut det = RuleDetector::new(cfg.clone(), trace.budget().gamma().to_vec())?;
    let mut resets = resets.iter().copied().peekable();
    let mut out = Vec::with_capacity(trace.len());
    for row in trace.rows() {
        while resets.next_if(|r| *r <= row.iteration).is_some() {
            det.request_rebaseline();
        }
        out.push(det.observe(row.iteration, &row.z)?);
    }
    Ok(out)
}

/// Recovers the operator's re-baselining points from a recorded trace: the
/// first row after every manipulated phase, and the first row of every
/// systemic (label 0) change.
pub fn operator_resets(trace: &IterationTrace) -> Vec<u64> {
    trace
        .rows()
        .windows(2)
        .filter(|w| {
            let (prev, row) = (&w[0], &w[1]);
            match (prev.phase, row.phase) {
                (Phase::Anomalous, Phase::Normal) => true,
                (Phase::Normal, Phase::Anomalous) => row.label == 0,
                // back-to-back manipulated phases do not occur, but a label
                // switch inside one would still be an operator boundary
                (Phase::Anomalous, Phase::Anomalous) => prev.label != row.label,
                (Phase::Normal, Phase::Normal) => false,
            }
        })
        .map(|w| w[1].iteration)
        .collect()
}

pub fn alarm_log(verdicts: &[DetectorVerdict]) -> Vec<AlarmRecord> {
    verdicts
        .iter()
        .flat_map(|v| {
            v.alarms.iter().enumerate().filter(|(_, a)| **a).map(move |(device, _)| AlarmRecord {
                iteration: v.iteration,
                device,
                threshold: v.threshold,
                deviation: v.deviation[device],
            })
        })
        .collect()
}

/// Direct tampering check `|z_i - x_i| >= delta`. The gateway never sees
/// `x`, so this only works in process, where the true `x` is at hand.
pub fn xz_check(x: &[f64], z: &[f64], delta: f64) -> Vec<bool> {
    x.iter().zip(z).map(|(x, z)| (z - x).abs() >= delta).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(threshold: f64) -> DetectorConfig {
        DetectorConfig { threshold, baseline_window: 3, ..Default::default() }
    }

    #[test]
    fn stationary_stream_never_alarms() {
        let z = vec![vec![2.0, 3.0, 1.5]; 50];
        for tau in STANDARD_THRESHOLDS {
            for mode in [VerdictMode::AnyAlarm, VerdictMode::ResponsePattern] {
                let v = rule_detect(&z, &z[0], &[1.0; 3], tau, mode).unwrap();
                assert!(v.iter().all(|v| v.predicted == 0 && v.alarms.iter().all(|a| !a)));
            }
        }
    }

    #[test]
    fn zero_baseline_scales_by_gamma() {
        let v = rule_detect(&[vec![0.05]], &[0.0], &[0.5], 0.2, VerdictMode::AnyAlarm).unwrap();
        assert!((v[0].deviation[0] - 0.1).abs() < 1e-12);
        assert_eq!(v[0].predicted, 0);
    }

    #[test]
    fn pattern_mode_reads_response_shape() {
        let base = [2.0, 2.0, 2.0];
        let g = [1.0; 3];
        let verdict = |z: Vec<f64>| rule_detect(&[z], &base, &g, 0.1, VerdictMode::ResponsePattern).unwrap()[0].predicted;
        assert_eq!(verdict(vec![3.0, 2.0, 2.0]), 1);
        assert_eq!(verdict(vec![3.0, 1.0, 2.0]), 1);
        assert_eq!(verdict(vec![1.5, 1.5, 1.5]), 0);
        assert_eq!(verdict(vec![2.05, 2.0, 2.0]), 0);
    }

    #[test]
    fn learns_baseline_after_settling() {
        let mut d = RuleDetector::new(cfg(0.1), vec![1.0; 2]).unwrap();
        // the first sample after a jump is not settled yet
        for (t, z) in [[5.0, 5.0], [3.0, 4.0], [3.0, 4.0], [3.0, 4.0]].iter().enumerate() {
            d.observe(t as u64, z).unwrap();
        }
        assert_eq!(d.baseline(), None);
        d.observe(4, &[3.0, 4.0]).unwrap();
        assert_eq!(d.baseline(), Some(&[3.0, 4.0][..]));
        let v = d.observe(5, &[4.0, 4.0]).unwrap();
        assert_eq!(v.alarms, vec![true, false]);
        assert_eq!(alarm_log(&[v]), vec![AlarmRecord { iteration: 5, device: 0, threshold: 0.1, deviation: 1.0 / 3.0 }]);
    }

    #[test]
    fn rebaseline_keeps_old_baseline_until_settled() {
        let mut d = RuleDetector::new(cfg(0.1), vec![1.0]).unwrap().with_baseline(vec![3.0]).unwrap();
        d.request_rebaseline();
        assert_eq!(d.observe(0, &[6.0]).unwrap().predicted, 1);
        for t in 1..=3 {
            d.observe(t, &[6.0]).unwrap();
        }
        assert_eq!(d.baseline(), Some(&[6.0][..]));
        assert_eq!(d.observe(4, &[6.0]).unwrap().predicted, 0);
    }

    #[test]
    fn xz_check_flags_divergence() {
        assert_eq!(xz_check(&[1.0, 2.0], &[1.0, 2.5], 0.5), vec![false, true]);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(RuleDetector::new(cfg(0.0), vec![1.0]).is_err());
        assert!(rule_detect(&[], &[1.0], &[1.0], -0.1, VerdictMode::AnyAlarm).is_err());
    }
}
