//! CSV exports for plotting. Each table `name.csv` comes with
//! `name.schema.json` describing its columns and row order.

use std::path::{Path, PathBuf};

use serde::Serialize;

use sdaf_core::diagnostics::ConcentrationScan;
use sdaf_core::solver::{ContinuationReport, FlowTrajectory};
use sdaf_core::SpectralData;

use crate::archive::{write_atomic, FORMAT};
use crate::error::{CliError, Result};

#[derive(Debug, Serialize)]
struct Column {
    name: &'static str,
    description: &'static str,
}

#[derive(Debug, Serialize)]
struct Schema {
    format: &'static str,
    table: &'static str,
    ordering: &'static str,
    columns: Vec<Column>,
}

fn col(name: &'static str, description: &'static str) -> Column {
    Column { name, description }
}

fn write_table<R: Serialize>(dir: &Path, schema: Schema, rows: impl IntoIterator<Item = R>) -> Result<PathBuf> {
    let path = dir.join(format!("{}.csv", schema.table));
    let ser = |e: csv::Error| CliError::Serialize(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Serialize(e.to_string()))?;
    write_atomic(&path, &bytes)?;
    let sidecar = serde_json::to_vec_pretty(&schema).map_err(|e| CliError::Serialize(e.to_string()))?;
    write_atomic(&dir.join(format!("{}.schema.json", schema.table)), &sidecar)?;
    Ok(path)
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    eigenvalue: f64,
    residual: f64,
}

/// `(index, eigenvalue, residual)` ordered by `|eigenvalue|`.
pub fn export_spectrum(dir: &Path, data: &SpectralData) -> Result<PathBuf> {
    let mut order: Vec<usize> = (0..data.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (data.eigenvalues[a], data.eigenvalues[b]);
        x.abs().total_cmp(&y.abs()).then(x.total_cmp(&y))
    });
    let rows = order.into_iter().map(|i| SpectrumRow {
        index: i,
        eigenvalue: data.eigenvalues[i],
        residual: data.residuals[i],
    });
    write_table(
        dir,
        Schema {
            format: FORMAT,
            table: "spectrum",
            ordering: "ascending |eigenvalue|, negative first within a tie",
            columns: vec![
                col("index", "position in the solver output"),
                col("eigenvalue", "eigenvalue of the Dirac operator along the map"),
                col("residual", "L2 norm of D psi - lambda psi"),
            ],
        },
        rows,
    )
}

#[derive(Serialize)]
struct FlowRow {
    t: f64,
    action: f64,
    dl_norm: f64,
    omega_norm: f64,
    norm_margin: f64,
    descent_margin: f64,
    eta: f64,
    dt: f64,
}

pub fn export_flow(dir: &Path, flow: &FlowTrajectory) -> Result<PathBuf> {
    let rows = flow.records.iter().map(|r| FlowRow {
        t: r.t,
        action: r.action,
        dl_norm: r.dl_norm,
        omega_norm: r.omega_norm,
        norm_margin: r.norm_margin,
        descent_margin: r.descent_margin,
        eta: r.eta,
        dt: r.dt,
    });
    write_table(
        dir,
        Schema {
            format: FORMAT,
            table: "flow",
            ordering: "accepted steps in increasing t",
            columns: vec![
                col("t", "flow time"),
                col("action", "action at time t"),
                col("dl_norm", "dual norm of the differential"),
                col("omega_norm", "norm of the pseudo-gradient field"),
                col("norm_margin", "2 |dL| - |omega|, nonnegative when the norm bound holds"),
                col("descent_margin", "dL(omega) - |dL|^2, nonnegative when the descent bound holds"),
                col("eta", "cutoff factor applied to omega"),
                col("dt", "step taken to reach t"),
            ],
        },
        rows,
    )
}

#[derive(Serialize)]
struct StageRow {
    stage: usize,
    alpha: f64,
    k: u32,
    action: Option<f64>,
    psi_l4: Option<f64>,
    monitor_energy: Option<f64>,
    bound_flag: bool,
    m_theta: Option<f64>,
    residual: Option<f64>,
    converged: bool,
    nontrivial: bool,
}

pub fn export_continuation(dir: &Path, report: &ContinuationReport) -> Result<PathBuf> {
    let rows = report.stages.iter().map(|s| StageRow {
        stage: s.stage,
        alpha: s.alpha,
        k: s.k,
        action: s.action,
        psi_l4: s.psi_l4,
        monitor_energy: s.monitor_energy,
        bound_flag: s.bound_flag,
        m_theta: s.m_theta,
        residual: s.residual,
        converged: s.converged,
        nontrivial: s.nontrivial,
    });
    write_table(
        dir,
        Schema {
            format: FORMAT,
            table: "continuation",
            ordering: "stage order: alpha outer, k inner",
            columns: vec![
                col("stage", "stage index"),
                col("alpha", "alpha of the stage"),
                col("k", "perturbation index, epsilon = 1/k"),
                col("action", "action at the stage solution; empty if the stage failed"),
                col("psi_l4", "integral of |psi|^4"),
                col("monitor_energy", "integral of |d phi|^(2 alpha) + |psi|^4"),
                col("bound_flag", "monitor energy exceeds the configured bound"),
                col("m_theta", "minimal alpha-energy in the class"),
                col("residual", "combined residual norm"),
                col("converged", "Newton reached the residual tolerance"),
                col("nontrivial", "psi is nonzero"),
            ],
        },
        rows,
    )
}

#[derive(Serialize)]
struct ConcentrationRow {
    x: f64,
    y: f64,
    energy: f64,
    flagged: bool,
}

pub fn export_concentration(dir: &Path, scan: &ConcentrationScan) -> Result<PathBuf> {
    let rows = scan
        .centers
        .iter()
        .zip(&scan.energies)
        .zip(&scan.flags)
        .map(|((c, e), f)| ConcentrationRow {
            x: c[0],
            y: c[1],
            energy: *e,
            flagged: *f,
        });
    write_table(
        dir,
        Schema {
            format: FORMAT,
            table: "concentration",
            ordering: "vertex order, x fastest",
            columns: vec![
                col("x", "ball center, first coordinate"),
                col("y", "ball center, second coordinate"),
                col("energy", "Dirichlet energy of the map in the ball"),
                col("flagged", "energy is at least the threshold"),
            ],
        },
        rows,
    )
}
