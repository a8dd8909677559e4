use edgefreq_core::kkt::{check_kkt, objective};
use edgefreq_core::optim::admm_solve;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::RunDir;

/// Published totals are shown as-is; a footnote appears when they differ
/// from the direct evaluation by more than this.
const REFERENCE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Serialize)]
pub struct AllocationRow {
    pub method: String,
    pub x: Vec<f64>,
    pub utility: f64,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationReport {
    pub scenario: String,
    pub iterations: usize,
    pub converged: bool,
    pub situation: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rows: Vec<AllocationRow>,
    pub footnotes: Vec<String>,
}

impl AllocationReport {
    pub fn row(&self, method: &str) -> Option<&AllocationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn render(&self) -> String {
        let mut s = format!("scenario {}: {} iterations, {}\n", self.scenario, self.iterations, self.situation);
        s.push_str(&format!("{:<14}{:<40}{:>12}  {}\n", "method", "x", "utility", "feasible"));
        for r in &self.rows {
            let x: Vec<String> = r.x.iter().map(|v| format!("{v:.4}")).collect();
            let mark = match r.reference {
                Some(p) if (p - r.utility).abs() > REFERENCE_TOLERANCE => "*",
                _ => "",
            };
            s.push_str(&format!(
                "{:<14}{:<40}{:>12}  {}\n",
                r.method,
                x.join(" "),
                format!("{:.2}{mark}", r.utility),
                if r.feasible { "yes" } else { "no" }
            ));
        }
        for f in &self.footnotes {
            s.push_str(&format!("* {f}\n"));
        }
        s
    }
}

/// Solves the configured allocation and compares it with the two naive
/// splits of `c`: equal shares and shares proportional to packet size.
pub fn cmd_allocate(cfg: &RunConfig, out: Option<&mut RunDir>) -> Result<AllocationReport, CliError> {
    let inst = cfg.instance().map_err(|e| CliError::Config(e.to_string()))?;
    let functions = &inst.functions;
    let budget = &inst.budget;
    let outcome = admm_solve(functions, budget, &cfg.solver)?;
    // the consensus iterate is feasible by construction
    let x = outcome.state.z.clone();
    let cert = check_kkt(&x, functions, budget, 1e-3)?;

    let n = functions.len() as f64;
    let c = cfg.budget.c;
    let sum_a: f64 = budget.a().iter().sum();
    let average: Vec<f64> = vec![c / n; functions.len()];
    let proportional: Vec<f64> = budget.a().iter().map(|a| a * c / sum_a).collect();

    let refs = cfg.reference_utilities;
    let mut rows = Vec::new();
    for (method, x, reference) in [
        ("admm", x, refs.and_then(|r| r.admm)),
        ("average", average, refs.and_then(|r| r.average)),
        ("proportional", proportional, refs.and_then(|r| r.proportional)),
    ] {
        rows.push(AllocationRow {
            method: method.into(),
            utility: objective(functions, &x)?,
            feasible: budget.contains(&x, 1e-6),
            x,
            reference,
        });
    }
    let footnotes = rows
        .iter()
        .filter_map(|r| {
            let p = r.reference?;
            ((p - r.utility).abs() > REFERENCE_TOLERANCE).then(|| {
                format!(
                    "{}: reference tables quote {p:.2}; direct evaluation of the utilities at the allocation shown gives {:.2}",
                    r.method, r.utility
                )
            })
        })
        .collect();
    let report = AllocationReport {
        scenario: cfg.scenario.clone(),
        iterations: outcome.iterations,
        converged: outcome.converged,
        situation: format!("{:?}", cert.situation),
        lambda1: cert.lambda1,
        lambda2: cert.lambda2,
        rows,
        footnotes,
    };
    if let Some(dir) = out {
        dir.write_json("allocation.json", &report)?;
        dir.write("allocation.txt", &report.render())?;
        let mut trace = outcome.trace.to_text();
        if !trace.ends_with('\n') {
            trace.push('\n');
        }
        dir.write("allocation.trace", &trace)?;
    }
    Ok(report)
}
