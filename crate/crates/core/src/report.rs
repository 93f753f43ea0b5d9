//! CSV report schemas (UTF-8, LF line endings, header row, `.` decimals).
//!
//! Floats are written in Rust's shortest round-trip form. Empty cells mean
//! "not applicable" (e.g. `mse` for generated samples, which have no paired
//! target).

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::twostage::RenormMode;
use crate::vae::LossBreakdown;

/// Bumped whenever a column set changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const REPORT_HEADER: &[&str] = &[
    "run_id",
    "stage",
    "renorm",
    "seed",
    "mse",
    "loss_per_feature",
    "loss_paper_axis",
    "variance_law",
    "ffd",
    "features",
];

pub const HISTORY_HEADER: &[&str] = &["epoch", "beta", "mse", "kl", "total", "variance_law", "mu_mean_norm"];

pub const SCATTER_HEADER: &[&str] = &[
    "cell",
    "kind",
    "latent_dim",
    "depth",
    "beta",
    "status",
    "mse",
    "loss_per_feature",
    "loss_paper_axis",
    "variance_law",
    "error",
];

pub const LATENT_HEADER: &[&str] = &["component", "mean_mu", "mean_mu_sq", "mean_sigma_sq", "law"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rec,
    Gen1,
    Gen2,
    Gen2Renorm,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Rec => "REC",
            Stage::Gen1 => "GEN-1",
            Stage::Gen2 => "GEN-2",
            Stage::Gen2Renorm => "GEN-2-renorm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub stage: Stage,
    pub renorm: RenormMode,
    pub seed: u64,
    pub mse: Option<f64>,
    pub loss_per_feature: f64,
    pub loss_paper_axis: f64,
    pub variance_law: f64,
    pub ffd: f64,
    pub features: String,
}

impl ReportRow {
    fn record(&self) -> Result<Vec<String>> {
        let nums = [self.loss_per_feature, self.loss_paper_axis, self.variance_law, self.ffd];
        if nums.iter().chain(self.mse.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("report row {} {}", self.run_id, self.stage)));
        }
        Ok(vec![
            self.run_id.clone(),
            self.stage.to_string(),
            self.renorm.to_string(),
            self.seed.to_string(),
            opt(self.mse),
            self.loss_per_feature.to_string(),
            self.loss_paper_axis.to_string(),
            self.variance_law.to_string(),
            self.ffd.to_string(),
            self.features.clone(),
        ])
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub mse: f64,
    pub loss_per_feature: f64,
    pub loss_paper_axis: f64,
    /// Absent for PCA rows.
    pub variance_law: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellKind {
    Vae { depth: usize, beta: f64 },
    Pca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub cell: usize,
    pub kind: CellKind,
    /// Latent dimension for VAE cells, retained components for PCA cells.
    pub latent_dim: usize,
    pub outcome: std::result::Result<CellMetrics, String>,
}

impl ScatterRow {
    fn record(&self) -> Vec<String> {
        let (kind, depth, beta) = match &self.kind {
            CellKind::Vae { depth, beta } => ("vae", depth.to_string(), beta.to_string()),
            CellKind::Pca => ("pca", String::new(), String::new()),
        };
        let mut r = vec![self.cell.to_string(), kind.into(), self.latent_dim.to_string(), depth, beta];
        match &self.outcome {
            Ok(m) => r.extend([
                "ok".into(),
                m.mse.to_string(),
                m.loss_per_feature.to_string(),
                m.loss_paper_axis.to_string(),
                opt(m.variance_law),
                String::new(),
            ]),
            Err(e) => r.extend([
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.replace(['\n', '\r'], " "),
            ]),
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentLawRow {
    pub component: usize,
    pub mean_mu: f64,
    pub mean_mu_sq: f64,
    pub mean_sigma_sq: f64,
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let recs = rows.iter().map(ReportRow::record).collect::<Result<Vec<_>>>()?;
    write_csv(path, REPORT_HEADER, recs)
}

pub fn write_history(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    write_csv(
        path,
        HISTORY_HEADER,
        history.iter().enumerate().map(|(e, h)| {
            vec![
                e.to_string(),
                h.beta.to_string(),
                h.mse.to_string(),
                h.kl.to_string(),
                h.total.to_string(),
                h.variance_law.to_string(),
                h.mu_mean_norm.to_string(),
            ]
        }),
    )
}

pub fn write_scatter(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    write_csv(path, SCATTER_HEADER, rows.iter().map(ScatterRow::record))
}

pub fn write_latent_law(path: &Path, rows: &[LatentLawRow]) -> Result<()> {
    write_csv(
        path,
        LATENT_HEADER,
        rows.iter().map(|r| {
            vec![
                r.component.to_string(),
                r.mean_mu.to_string(),
                r.mean_mu_sq.to_string(),
                r.mean_sigma_sq.to_string(),
                (r.mean_mu_sq + r.mean_sigma_sq).to_string(),
            ]
        }),
    )
}

/// Free-form table for demo outputs.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    if rows.iter().any(|r| r.len() != header.len()) {
        return Err(Error::invalid("table row width differs from header"));
    }
    write_csv(
        path,
        header,
        rows.iter().map(|r| r.iter().map(|v| v.to_string()).collect()),
    )
}

/// Header plus rows as strings, for tests and tooling.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
