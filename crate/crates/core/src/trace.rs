//! Labelled per-iteration records of the gateway-visible signals `(z, v)`.
//!
//! On disk a trace is one JSON header line followed by one comma-separated
//! row per iteration:
//!
//! ```text
//! {"n":3,"c":10.0,"d":20.0,"a":[2.0,3.0,5.0],"gamma":[1.0,1.0,1.0],"columns":["iteration","z1",...,"label","phase"]}
//! 0,1.5,2.25,1.125,1.5,2.25,1.125,0,normal
//! ```
//!
//! Floats are written in shortest round-trip form, so `import(export(t)) == t`
//! bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::ResourceBudget;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Normal,
    Anomalous,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::Anomalous => "anomalous",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normal" => Ok(Phase::Normal),
            "anomalous" => Ok(Phase::Anomalous),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    /// 0 = normal or systemic, 1 = function swap, 2 = size change, 3 = input shift.
    pub label: u8,
    pub phase: Phase,
}

impl TraceRow {
    pub fn new(iteration: u64, z: Vec<f64>, v: Vec<f64>, label: u8, phase: Phase) -> Self {
        TraceRow { iteration, z, v, label, phase }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    c: f64,
    d: f64,
    a: Vec<f64>,
    gamma: Vec<f64>,
    columns: Vec<String>,
}

fn columns(n: usize) -> Vec<String> {
    let mut cols = vec!["iteration".to_string()];
    cols.extend((1..=n).map(|i| format!("z{i}")));
    cols.extend((1..=n).map(|i| format!("v{i}")));
    cols.push("label".into());
    cols.push("phase".into());
    cols
}

/// A time-ordered trace for a fixed device set. The budget is the one in
/// force when the trace started; later systemic changes show up only through
/// the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    budget: ResourceBudget,
    rows: Vec<TraceRow>,
}

impl IterationTrace {
    pub fn new(budget: ResourceBudget) -> Self {
        IterationTrace { budget, rows: Vec::new() }
    }

    pub fn budget(&self) -> &ResourceBudget {
        &self.budget
    }

    pub fn n(&self) -> usize {
        self.budget.len()
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Panics if the row width disagrees with the device count; that is a
    /// programming error, not a data error.
    pub fn push(&mut self, row: TraceRow) {
        assert_eq!(row.z.len(), self.n(), "z width mismatch");
        assert_eq!(row.v.len(), self.n(), "v width mismatch");
        self.rows.push(row);
    }

    pub fn z_stream(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| r.z.as_slice())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Checks that labels only change where the phase changes and that
    /// anomalous phases carry a nonzero label.
    pub fn check_labels(&self) -> Result<()> {
        for (k, w) in self.rows.windows(2).enumerate() {
            if w[0].label != w[1].label && w[0].phase == w[1].phase {
                return Err(Error::Contract(format!("label changes inside a phase at row {}", k + 1)));
            }
        }
        if let Some(r) = self.rows.iter().find(|r| (r.phase == Phase::Anomalous) != (r.label != 0)) {
            return Err(Error::Contract(format!(
                "iteration {} has label {} in a {} phase",
                r.iteration,
                r.label,
                r.phase.as_str()
            )));
        }
        Ok(())
    }

    fn header_line(&self) -> String {
        let b = &self.budget;
        let h = Header {
            n: self.n(),
            c: b.c(),
            d: b.d(),
            a: b.a().to_vec(),
            gamma: b.gamma().to_vec(),
            columns: columns(self.n()),
        };
        serde_json::to_string(&h).expect("header serialisation cannot fail")
    }

    /// Serialises the full trace to a string in the on-disk format.
    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for r in &self.rows {
            write!(out, "{}", r.iteration).unwrap();
            for x in r.z.iter().chain(&r.v) {
                write!(out, ",{x}").unwrap();
            }
            writeln!(out, ",{},{}", r.label, r.phase.as_str()).unwrap();
        }
        out
    }

    /// Writes through a sibling temporary file that is renamed into place,
    /// so a failed export never leaves a truncated trace behind.
    pub fn export(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_text().as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error.to_string()))?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }

    fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header_line = match lines.next() {
            Some(l) => l?,
            None => return Err(Error::TraceParse { line: 1, reason: "empty file".into() }),
        };
        let h: Header =
            serde_json::from_str(&header_line).map_err(|e| Error::TraceParse { line: 1, reason: e.to_string() })?;
        let budget = ResourceBudget::new(h.c, h.d, h.a, h.gamma)
            .map_err(|e| Error::TraceParse { line: 1, reason: e.to_string() })?;
        if h.n != budget.len() || h.columns != columns(h.n) {
            return Err(Error::TraceParse { line: 1, reason: "column list does not match n".into() });
        }
        let n = h.n;
        let mut trace = IterationTrace::new(budget);
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line?;
            let err = |reason: String| Error::TraceParse { line: lineno, reason };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 * n + 3 {
                return Err(err(format!("expected {} fields, found {}", 2 * n + 3, fields.len())));
            }
            let iteration = fields[0].parse::<u64>().map_err(|e| err(format!("iteration: {e}")))?;
            let mut nums = Vec::with_capacity(2 * n);
            for (k, f) in fields[1..=2 * n].iter().enumerate() {
                nums.push(f.parse::<f64>().map_err(|e| err(format!("column {}: {e}", k + 2)))?);
            }
            let label = fields[2 * n + 1].parse::<u8>().map_err(|e| err(format!("label: {e}")))?;
            if label > 3 {
                return Err(err(format!("label {label} out of range")));
            }
            let phase = fields[2 * n + 2].parse::<Phase>().map_err(err)?;
            let v = nums.split_off(n);
            trace.rows.push(TraceRow { iteration, z: nums, v, label, phase });
        }
        Ok(trace)
    }
}
