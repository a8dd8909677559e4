use std::collections::BTreeSet;

use edgefreq_core::anomaly::{
    alarm_log, generate_scenario, networked_profile, run_detector, score, DetectorVerdict, Label, Metrics, PhaseRecord,
    Scenario, ScenarioEvent, ScenarioMode,
};
use edgefreq_core::instances::Instance;
use serde::Serialize;

use crate::config::{CampaignMode, DetectorSettings, RunConfig};
use crate::error::CliError;
use crate::output::{csv_line, RunDir};

/// Seed offsets for the independent runs of one campaign.
const SPLIT_SEED_OFFSETS: [(&str, u64); 3] = [("train", 0), ("val", 1), ("test", 2)];
const PER_LABEL_SEED_OFFSET: u64 = 100;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub metrics: Metrics,
    pub alarms: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelSweep {
    pub label: Label,
    pub seed: u64,
    /// Two-class accuracy at each configured threshold, in order.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub name: String,
    pub seed: u64,
    pub rows: usize,
    pub phases: Vec<PhaseRecord>,
    pub events: Vec<ScenarioEvent>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CampaignReport {
    pub scenario: String,
    pub thresholds: Vec<f64>,
    pub splits: Vec<SplitSummary>,
    /// Rule detector on the test split.
    pub test_sweep: Vec<SweepRow>,
    /// Rule detector on single-label runs of test length.
    pub per_label: Vec<LabelSweep>,
    /// Alarm sets shrank with the threshold on every stream evaluated.
    pub monotone: bool,
}

impl CampaignReport {
    pub fn label_accuracy(&self, label: Label, threshold: f64) -> Option<f64> {
        let k = self.thresholds.iter().position(|t| *t == threshold)?;
        self.per_label.iter().find(|l| l.label == label).map(|l| l.accuracy[k])
    }

    pub fn render(&self) -> String {
        let mut s = format!("scenario {}: rule detector, test split\n", self.scenario);
        s.push_str(&format!(
            "{:>10}{:>10}{:>11}{:>9}{:>13}{:>8}\n",
            "threshold", "accuracy", "precision", "recall", "specificity", "alarms"
        ));
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for r in &self.test_sweep {
            s.push_str(&format!(
                "{:>10}{:>10.4}{:>11}{:>9}{:>13}{:>8}\n",
                format!("{:.0}%", 100.0 * r.threshold),
                r.metrics.accuracy,
                opt(r.metrics.precision),
                opt(r.metrics.recall),
                opt(r.metrics.specificity),
                r.alarms
            ));
        }
        if !self.per_label.is_empty() {
            s.push_str("\naccuracy by manipulation type\n");
            s.push_str(&format!("{:>6}", "label"));
            for t in &self.thresholds {
                s.push_str(&format!("{:>9}", format!("{:.0}%", 100.0 * t)));
            }
            s.push('\n');
            for l in &self.per_label {
                s.push_str(&format!("{:>6}", l.label.as_u8()));
                for a in &l.accuracy {
                    s.push_str(&format!("{a:>9.4}"));
                }
                s.push('\n');
            }
        }
        s.push_str(&format!("threshold monotonicity: {}\n", if self.monotone { "holds" } else { "VIOLATED" }));
        s
    }
}

fn mode(cfg: &RunConfig, seed: u64) -> ScenarioMode {
    match cfg.campaign.mode {
        CampaignMode::InProcess => ScenarioMode::InProcess(cfg.solver.clone()),
        CampaignMode::Networked => {
            let (mut gateway, profile) = networked_profile(seed);
            gateway.solver = cfg.solver.clone();
            ScenarioMode::Networked { gateway, profile }
        }
    }
}

/// Runs the detector at every threshold. Returns the verdict streams and
/// whether each device's alarm set shrank as the threshold grew.
fn sweep(scenario: &Scenario, settings: &DetectorSettings) -> Result<(Vec<Vec<DetectorVerdict>>, bool), CliError> {
    let streams = settings
        .thresholds
        .iter()
        .map(|t| run_detector(&scenario.trace, &scenario.resets, &settings.at(*t)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..streams.len()).collect();
    order.sort_by(|a, b| settings.thresholds[*a].total_cmp(&settings.thresholds[*b]));
    let monotone = order.windows(2).all(|w| {
        streams[w[1]].iter().zip(&streams[w[0]]).all(|(hi, lo)| hi.alarms.iter().zip(&lo.alarms).all(|(h, l)| !h || *l))
    });
    Ok((streams, monotone))
}

fn predictions(v: &[DetectorVerdict]) -> Vec<u8> {
    v.iter().map(|v| v.predicted).collect()
}

/// Runs independent scenarios on scoped threads; results come back in input
/// order, so the output does not depend on scheduling.
fn generate_all(
    inst: &Instance,
    cfg: &RunConfig,
    jobs: &[(u64, usize, edgefreq_core::anomaly::ScenarioSpec)],
) -> Result<Vec<Scenario>, CliError> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(seed, len, spec)| {
                let mode = mode(cfg, *seed);
                s.spawn(move || generate_scenario(*seed, *len, inst, spec, &mode))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked").map_err(CliError::from)).collect()
    })
}

/// Generates labelled train/validation/test traces and scores the rule
/// detector across the configured thresholds.
pub fn cmd_campaign(cfg: &RunConfig, out: Option<&mut RunDir>) -> Result<CampaignReport, CliError> {
    let inst = cfg.instance().map_err(|e| CliError::Config(e.to_string()))?;
    let c = &cfg.campaign;
    let spec = c.scenario_spec();
    let lens = [c.train_len, c.val_len, c.test_len];
    let labels: BTreeSet<Label> = c.labels.iter().copied().collect();

    let mut jobs: Vec<_> =
        SPLIT_SEED_OFFSETS.iter().zip(lens).map(|((_, off), len)| (c.seed + off, len, spec.clone())).collect();
    for label in &labels {
        let seed = c.seed + PER_LABEL_SEED_OFFSET + label.as_u8() as u64;
        jobs.push((seed, c.test_len, edgefreq_core::anomaly::ScenarioSpec { labels: vec![*label], ..spec.clone() }));
    }
    let scenarios = generate_all(&inst, cfg, &jobs)?;

    let test = &scenarios[2];
    let (streams, mut monotone) = sweep(test, &cfg.detector)?;
    let truth = test.trace.labels();
    let mut test_sweep = Vec::new();
    for (t, v) in cfg.detector.thresholds.iter().zip(&streams) {
        test_sweep.push(SweepRow { threshold: *t, metrics: score(&predictions(v), &truth, 2)?, alarms: alarm_log(v).len() });
    }
    let mut per_label = Vec::new();
    for (label, s) in labels.iter().zip(&scenarios[3..]) {
        let (streams, ok) = sweep(s, &cfg.detector)?;
        monotone &= ok;
        let truth = s.trace.labels();
        let accuracy =
            streams.iter().map(|v| score(&predictions(v), &truth, 2).map(|m| m.accuracy)).collect::<Result<_, _>>()?;
        per_label.push(LabelSweep { label: *label, seed: jobs[3 + per_label.len()].0, accuracy });
    }

    let splits = SPLIT_SEED_OFFSETS
        .iter()
        .zip(&scenarios)
        .zip(&jobs)
        .map(|(((name, _), s), job)| SplitSummary {
            name: name.to_string(),
            seed: job.0,
            rows: s.trace.len(),
            phases: s.phases.clone(),
            events: s.events.clone(),
        })
        .collect();
    let report = CampaignReport {
        scenario: cfg.scenario.clone(),
        thresholds: cfg.detector.thresholds.clone(),
        splits,
        test_sweep,
        per_label,
        monotone,
    };

    if let Some(dir) = out {
        for ((name, _), s) in SPLIT_SEED_OFFSETS.iter().zip(&scenarios) {
            let file = format!("{name}.trace");
            s.trace.export(&dir.path(&file))?;
            dir.record(&file);
        }
        let mut alarms = String::from("iteration,device,threshold,deviation\n");
        for v in &streams {
            for a in alarm_log(v) {
                csv_line(
                    &mut alarms,
                    &[a.iteration.to_string(), a.device.to_string(), a.threshold.to_string(), a.deviation.to_string()],
                );
            }
        }
        dir.write("alarms_test.csv", &alarms)?;
        dir.write_json("campaign.json", &report)?;
        dir.write("campaign.txt", &report.render())?;
    }
    Ok(report)
}
