//! JSON and CSV serialization of evaluation reports, optimization traces,
//! sweeps, and diagnostics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{CoverageReport, LayerDiagnostics};
use crate::error::Result;
use crate::harness::{EvalReport, SweepPoint};
use crate::mergers::MergeConfig;
use crate::tara::TraceRow;

/// Everything a merge run reports besides the merged weights themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved: Option<MergeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference: Option<Vec<f64>>,
    pub eval: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub layers: Vec<LayerDiagnostics>,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_eval_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let rows = report
        .tasks
        .iter()
        .zip(report.accuracy.iter().zip(&report.normalized))
        .map(|(t, (a, n))| vec![t.clone(), a.to_string(), n.to_string()])
        .collect();
    write_rows(
        path.as_ref(),
        vec!["task".into(), "accuracy".into(), "normalized".into()],
        rows,
    )
}

/// One row per step: `step, psi, f_<task>...`.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow], tasks: &[String]) -> Result<()> {
    let mut header = vec!["step".to_string(), "psi".to_string()];
    header.extend(tasks.iter().map(|t| format!("f_{t}")));
    let rows = trace
        .iter()
        .map(|r| {
            let mut row = vec![r.step.to_string(), r.psi.to_string()];
            row.extend(r.task_losses.iter().map(f64::to_string));
            row
        })
        .collect();
    write_rows(path.as_ref(), header, rows)
}

/// One row per preference: `rho_<task>..., acc_<task>..., norm_<task>...`.
pub fn write_sweep_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    let tasks = points.first().map(|p| p.report.tasks.clone()).unwrap_or_default();
    let mut header: Vec<String> = tasks.iter().map(|t| format!("rho_{t}")).collect();
    header.extend(tasks.iter().map(|t| format!("acc_{t}")));
    header.extend(tasks.iter().map(|t| format!("norm_{t}")));
    let rows = points
        .iter()
        .map(|p| {
            p.rho
                .as_slice()
                .iter()
                .chain(&p.report.accuracy)
                .chain(&p.report.normalized)
                .map(f64::to_string)
                .collect()
        })
        .collect();
    write_rows(path.as_ref(), header, rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_coverage_csv(path: impl AsRef<Path>, cov: &CoverageReport) -> Result<()> {
    let rows = cov
        .layers
        .iter()
        .map(|l| {
            vec![
                l.layer_id.clone(),
                l.per_task_sum.to_string(),
                opt(l.aware_erank),
                opt(l.agnostic_erank),
            ]
        })
        .collect();
    write_rows(
        path.as_ref(),
        vec!["layer".into(), "per_task_sum".into(), "aware_erank".into(), "agnostic_erank".into()],
        rows,
    )
}

/// Long format: one row per (layer, basis, singular index) with κ and the
/// energy fraction, plus the ξ values of that layer in their own rows.
pub fn write_layer_diagnostics_csv(path: impl AsRef<Path>, layers: &[LayerDiagnostics]) -> Result<()> {
    let basis = |l: &LayerDiagnostics| serde_json::to_value(l.basis).map(|v| v.as_str().unwrap_or("").to_string());
    let mut rows = Vec::new();
    for l in layers {
        let b = basis(l)?;
        for (k, (s, e)) in l.sigma.iter().zip(&l.energy).enumerate() {
            rows.push(vec![
                l.layer_id.clone(),
                b.clone(),
                "sigma".into(),
                k.to_string(),
                s.to_string(),
                e.to_string(),
            ]);
        }
        rows.push(vec![l.layer_id.clone(), b.clone(), "kappa".into(), String::new(), l.kappa.to_string(), String::new()]);
        for (i, x) in l.xi.iter().enumerate() {
            rows.push(vec![l.layer_id.clone(), b.clone(), "xi".into(), i.to_string(), x.to_string(), String::new()]);
        }
    }
    write_rows(
        path.as_ref(),
        vec![
            "layer".into(),
            "basis".into(),
            "quantity".into(),
            "index".into(),
            "value".into(),
            "energy".into(),
        ],
        rows,
    )
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

