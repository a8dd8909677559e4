use std::path::Path;

use edgefreq_core::anomaly::{operator_resets, run_detector, score, window_majority, Metrics};
use edgefreq_core::trace::IterationTrace;
use serde::Serialize;

use crate::config::DetectorSettings;
use crate::error::CliError;
use crate::output::RunDir;

/// How an external prediction file lines up with trace rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windowing {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreRow {
    /// Detector threshold, or `None` for an external prediction file.
    pub threshold: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub trace_rows: usize,
    pub classes: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{} trace rows, {}-class scoring\n", self.trace_rows, self.classes);
        s.push_str(&format!("{:>10}{:>10}{:>11}{:>9}{:>13}\n", "threshold", "accuracy", "precision", "recall", "specificity"));
        for r in &self.rows {
            let t = r.threshold.map_or("file".to_string(), |t| format!("{:.0}%", 100.0 * t));
            s.push_str(&format!(
                "{:>10}{:>10.4}{:>11}{:>9}{:>13}\n",
                t,
                r.metrics.accuracy,
                opt(r.metrics.precision),
                opt(r.metrics.recall),
                opt(r.metrics.specificity)
            ));
        }
        s
    }
}

/// Reads one label per non-empty line; an optional leading `index,` column
/// is ignored.
pub fn read_predictions(path: &Path) -> Result<Vec<u8>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read predictions {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let field = l.rsplit(',').next().unwrap_or(l).trim();
            field
                .parse::<u8>()
                .map_err(|e| CliError::Config(format!("{}:{}: bad label `{field}`: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Scores either the rule detector (at each threshold) or an external
/// prediction stream against a trace's labels.
pub fn cmd_score(
    trace_path: &Path,
    predictions: Option<&Path>,
    windowing: Option<Windowing>,
    classes: usize,
    detector: &DetectorSettings,
    out: Option<&mut RunDir>,
) -> Result<ScoreReport, CliError> {
    if classes != 2 && classes != 4 {
        return Err(CliError::Config(format!("classes must be 2 or 4, got {classes}")));
    }
    let trace = IterationTrace::import(trace_path)?;
    let truth = trace.labels();
    let rows = match predictions {
        Some(p) => {
            let pred = read_predictions(p)?;
            let truth = match windowing {
                Some(w) => window_majority(&truth, w.window, w.stride)?,
                None => truth,
            };
            vec![ScoreRow { threshold: None, metrics: score(&pred, &truth, classes)? }]
        }
        None => {
            let resets = operator_resets(&trace);
            detector
                .thresholds
                .iter()
                .map(|t| {
                    let v = run_detector(&trace, &resets, &detector.at(*t))?;
                    let pred: Vec<u8> = v.iter().map(|v| v.predicted).collect();
                    // the rule detector is two-class by construction
                    Ok(ScoreRow { threshold: Some(*t), metrics: score(&pred, &truth, 2)? })
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    let report = ScoreReport { trace_rows: trace.len(), classes: if predictions.is_some() { classes } else { 2 }, rows };
    if let Some(dir) = out {
        dir.write_json("score.json", &report)?;
        dir.write("score.txt", &report.render())?;
    }
    Ok(report)
}
