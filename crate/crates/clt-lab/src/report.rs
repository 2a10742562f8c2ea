//! Criterion records, tables and the on-disk report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    /// `lhs ≤ rhs + tolerance + ci + floor`.
    Le,
    /// `lo − slack ≤ lhs ≤ rhs + slack` with `slack = tolerance + ci`.
    Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRecord {
    /// Acceptance criterion this record belongs to, `C1` … `C10`.
    pub criterion: String,
    /// Cell within the criterion, e.g. `d=2,n=16`.
    pub id: String,
    pub kind: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    pub tolerance: f64,
    pub ci: f64,
    pub floor: f64,
    pub pass: bool,
}

impl CriterionRecord {
    pub fn le(criterion: &str, id: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            criterion: criterion.into(),
            id: id.into(),
            kind: CheckKind::Le,
            lhs,
            rhs,
            lo: None,
            tolerance: 0.0,
            ci: 0.0,
            floor: 0.0,
            pass: false,
        }
        .settle()
    }

    pub fn range(criterion: &str, id: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self { kind: CheckKind::Range, lo: Some(lo), ..Self::le(criterion, id, value, hi) }.settle()
    }

    pub fn ci(mut self, ci: f64) -> Self {
        self.ci = ci;
        self.settle()
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self.settle()
    }

    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self.settle()
    }

    fn settle(mut self) -> Self {
        self.pass = self.evaluate();
        self
    }

    fn evaluate(&self) -> bool {
        let slack = self.tolerance + self.ci;
        match self.kind {
            CheckKind::Le => self.lhs <= self.rhs + slack + self.floor,
            CheckKind::Range => {
                let lo = self.lo.unwrap_or(f64::NEG_INFINITY);
                self.lhs >= lo - slack && self.lhs <= self.rhs + slack
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    /// The statement the experiment checks.
    pub binding: String,
    pub quick: bool,
    pub criteria: Vec<CriterionRecord>,
    /// Free-form numbers worth keeping that are not pass/fail.
    pub notes: Vec<(String, f64)>,
    pub tables: Vec<String>,
    pub provenance: Provenance,
    pub passed: bool,
}

impl Report {
    pub fn new(experiment: &str, binding: &str, quick: bool, provenance: Provenance) -> Self {
        Self {
            experiment: experiment.into(),
            binding: binding.into(),
            quick,
            criteria: vec![],
            notes: vec![],
            tables: vec![],
            provenance,
            passed: true,
        }
    }

    pub fn push(&mut self, c: CriterionRecord) {
        self.passed &= c.pass;
        self.criteria.push(c);
    }

    pub fn note(&mut self, key: &str, value: f64) {
        self.notes.push((key.into(), value));
    }

    /// Records grouped by criterion id, in first-seen order, with the
    /// conjunction of their pass flags.
    pub fn by_criterion(&self) -> Vec<(String, bool, usize)> {
        let mut out: Vec<(String, bool, usize)> = vec![];
        for c in &self.criteria {
            match out.iter_mut().find(|e| e.0 == c.criterion) {
                Some(e) => {
                    e.1 &= c.pass;
                    e.2 += 1;
                }
                None => out.push((c.criterion.clone(), c.pass, 1)),
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} ({})", self.experiment, self.binding);
        let _ = writeln!(s, "seed {} config {}", self.provenance.seed, self.provenance.config_sha256);
        for c in &self.criteria {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            let _ = match c.kind {
                CheckKind::Le => writeln!(
                    s,
                    "{verdict} {} {}: {:.6e} <= {:.6e} (ci {:.3e}, floor {:.3e}, tol {:.3e})",
                    c.criterion, c.id, c.lhs, c.rhs, c.ci, c.floor, c.tolerance
                ),
                CheckKind::Range => writeln!(
                    s,
                    "{verdict} {} {}: {:.6e} in [{:.6e}, {:.6e}] (ci {:.3e}, tol {:.3e})",
                    c.criterion,
                    c.id,
                    c.lhs,
                    c.lo.unwrap_or(f64::NEG_INFINITY),
                    c.rhs,
                    c.ci,
                    c.tolerance
                ),
            };
        }
        for (k, v) in &self.notes {
            let _ = writeln!(s, "note {k} = {v:.6e}");
        }
        let _ = writeln!(s, "{}", if self.passed { "ALL PASS" } else { "SOME FAILED" });
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::I(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        assert_eq!(cells.len(), self.header.len(), "row width for {}", self.name);
        self.rows.push(cells);
    }

    /// Floats as `{:.16e}`, i.e. 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .iter()
                .map(|c| match c {
                    Cell::F(v) => format!("{v:.16e}"),
                    Cell::I(v) => v.to_string(),
                    Cell::S(v) => v.clone(),
                })
                .collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Writes `report.json`, `summary.txt` and `<table>.csv` into `dir`.
pub fn write_outputs(dir: &Path, report: &Report, tables: &[Table]) -> Result<(), LabError> {
    let io = |e: std::io::Error| LabError::Io(dir.to_path_buf(), e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(dir.join("report.json"), json + "\n").map_err(io)?;
    std::fs::write(dir.join("summary.txt"), report.summary()).map_err(io)?;
    for t in tables {
        std::fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv()).map_err(io)?;
    }
    Ok(())
}
