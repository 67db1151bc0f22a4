//! Experiment reports and their on-disk form: `rows.csv`, optional
//! `audit.csv` and `concentration.csv`, `summary.json` and `plotdata/*.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One estimator run on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub sigma: f64,
    pub n: usize,
    pub trial: usize,
    pub estimator: String,
    pub error_rho: Option<f64>,
    pub nll: Option<f64>,
    pub wall_ms: u64,
    pub status: String,
}

impl TrialRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Aggregate of one `(sigma, n, estimator)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub sigma: f64,
    pub n: usize,
    pub estimator: String,
    pub scheduled: usize,
    pub failures: usize,
    pub median_error: Option<f64>,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub name: String,
    pub estimator: String,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub points: Vec<(f64, f64)>,
}

/// One audited inequality or identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub name: String,
    pub pair: usize,
    pub sigma: f64,
    /// `lower`, `upper` or `equal`.
    pub side: String,
    pub value: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub sigma: f64,
    pub n: usize,
    pub delta: f64,
    pub trials: usize,
    pub exceed: usize,
    pub frequency: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub tail_rhs: f64,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub rows: Vec<TrialRow>,
    pub cells: Vec<CellSummary>,
    pub fits: Vec<SlopeFit>,
    pub audit: Vec<AuditRow>,
    pub concentration: Vec<ConcentrationRow>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn fit(&self, name: &str, estimator: &str) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.name == name && f.estimator == estimator)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    kind: &'a str,
    pass: bool,
    scheduled: usize,
    failures: usize,
    cells: &'a [CellSummary],
    fits: &'a [SlopeFit],
    checks: &'a [Check],
}

fn write_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub const ROW_HEADER: [&str; 8] = ["sigma", "n", "trial", "estimator", "error_rho", "nll", "wall_ms", "status"];

pub fn rows_to_csv(rows: &[TrialRow]) -> Result<Vec<u8>> {
    write_csv(rows, &ROW_HEADER)
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ROW_HEADER {
        return Err(Error::Parse(format!("unexpected rows header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn plot_csv(points: &[(f64, f64)]) -> Vec<u8> {
    let mut out = String::from("x,y\n");
    for (x, y) in points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out.into_bytes()
}

/// Writes the report under `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let plot_dir = dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
    write_file(&dir.join("rows.csv"), &rows_to_csv(&report.rows)?)?;
    if !report.audit.is_empty() {
        let header = ["name", "pair", "sigma", "side", "value", "mc_estimate", "mc_stderr", "pass"];
        write_file(&dir.join("audit.csv"), &write_csv(&report.audit, &header)?)?;
    }
    if !report.concentration.is_empty() {
        let header = [
            "sigma", "n", "delta", "trials", "exceed", "frequency", "ci_lo", "ci_hi", "tail_rhs", "flags",
        ];
        write_file(&dir.join("concentration.csv"), &write_csv(&report.concentration, &header)?)?;
    }
    let summary = Summary {
        kind: &report.kind,
        pass: report.pass(),
        scheduled: report.rows.len(),
        failures: report.rows.iter().filter(|r| !r.is_ok()).count(),
        cells: &report.cells,
        fits: &report.fits,
        checks: &report.checks,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("summary.json"), format!("{json}\n").as_bytes())?;
    for f in &report.fits {
        let name = format!("{}_{}.csv", f.name, f.estimator);
        write_file(&plot_dir.join(name), &plot_csv(&f.points))?;
    }
    if !report.concentration.is_empty() {
        let mut sigmas: Vec<f64> = report.concentration.iter().map(|r| r.sigma).collect();
        sigmas.dedup();
        for (i, s) in sigmas.iter().enumerate() {
            let pts: Vec<(f64, f64)> = report
                .concentration
                .iter()
                .filter(|r| r.sigma == *s)
                .map(|r| (r.n as f64, r.frequency))
                .collect();
            write_file(&plot_dir.join(format!("exceedance_vs_n_sigma{i}.csv")), &plot_csv(&pts))?;
        }
    }
    if !report.audit.is_empty() {
        let pts: Vec<(f64, f64)> = report
            .audit
            .iter()
            .filter(|r| r.name == "kl_series_lower")
            .map(|r| (r.value, r.mc_estimate))
            .collect();
        write_file(&plot_dir.join("kl_vs_series.csv"), &plot_csv(&pts))?;
    }
    Ok(())
}
