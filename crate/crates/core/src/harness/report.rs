//! CSV and JSON output for study reports and trajectories.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::study::StudyReport;
use crate::error::{Error, Result};
use crate::explicit_scheme::Trajectory;

/// Fixed CSV columns of a study report.
pub const REPORT_COLUMNS: [&str; 6] = ["k", "tau", "w1_gap", "residual_max", "residual_mean", "runtime_s"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::ContractViolation(format!("unknown format `{other}` (expected csv or json)"))),
        }
    }
}

impl ReportFormat {
    /// Guess from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The report as CSV text: a header plus one row per `k`.
pub fn report_csv(report: &StudyReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.k.to_string(),
            r.tau.to_string(),
            cell(r.w1_gap),
            cell(r.residual_max),
            cell(r.residual_mean),
            cell(r.runtime_s),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn export_report(report: &StudyReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(report)?,
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))? + "\n",
    };
    write_text(path.as_ref(), &text)
}

#[derive(Serialize)]
struct AgentRow<'a> {
    agent_id: usize,
    weight: f64,
    x: &'a [f64],
    lambda: &'a [f64],
}

#[derive(Serialize)]
struct Snapshot<'a> {
    time: f64,
    agents: Vec<AgentRow<'a>>,
}

/// Agent tables at the configured snapshot times reached by the run.
pub fn export_trajectory(traj: &Trajectory, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let measures = traj
        .config()
        .snapshot_times
        .iter()
        .filter(|&&t| t <= traj.end_time() + 1e-12)
        .map(|&t| Ok((t, traj.at(t.min(traj.end_time()))?)))
        .collect::<Result<Vec<_>>>()?;
    let text = match format {
        ReportFormat::Json => {
            let snaps: Vec<Snapshot> = measures
                .iter()
                .map(|(t, psi)| Snapshot {
                    time: *t,
                    agents: psi
                        .agents()
                        .iter()
                        .zip(psi.weights())
                        .enumerate()
                        .map(|(i, (a, &w))| AgentRow { agent_id: i, weight: w, x: &a.x, lambda: a.lambda.weights() })
                        .collect(),
                })
                .collect();
            serde_json::to_string_pretty(&snaps).map_err(|e| Error::Io(e.to_string()))? + "\n"
        }
        ReportFormat::Csv => {
            let psi0 = &traj.nodes()[0].1;
            let mut header = vec!["time".to_string(), "agent_id".into(), "weight".into()];
            header.extend((0..psi0.dim()).map(|j| format!("x{j}")));
            header.extend((0..psi0.labels()).map(|h| format!("lambda{h}")));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).map_err(csv_err)?;
            for (t, psi) in &measures {
                for (i, (a, wt)) in psi.agents().iter().zip(psi.weights()).enumerate() {
                    let mut rec = vec![t.to_string(), i.to_string(), wt.to_string()];
                    rec.extend(a.x.iter().map(f64::to_string));
                    rec.extend(a.lambda.weights().iter().map(f64::to_string));
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.to_string()))?)
                .map_err(|e| Error::Io(e.to_string()))?
        }
    };
    write_text(path.as_ref(), &text)
}
