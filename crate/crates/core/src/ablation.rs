//! One-axis sweeps: train a model per setting, evaluate it, tabulate.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{DistillStrategy, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalOptions, MetricsReport};
use crate::trainer::{train_loop, LoopOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    DistillStrategy,
    LossBalance,
    GtbDepth,
    Beta,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::DistillStrategy, Self::LossBalance, Self::GtbDepth, Self::Beta];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DistillStrategy => "distill_strategy",
            Self::LossBalance => "loss_balance",
            Self::GtbDepth => "gtb_depth",
            Self::Beta => "beta",
        }
    }

    /// `(label, config)` for every setting on this axis; everything else comes from `base`.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Self::DistillStrategy => DistillStrategy::ALL
                .iter()
                .map(|&s| (s.as_str().to_string(), RunConfig { distill_strategy: s, ..base.clone() }))
                .collect(),
            Self::LossBalance => [(1.0, 0.0), (100.0, 1.0), (1.0, 1.0), (1.0, 100.0), (0.0, 1.0)]
                .into_iter()
                .map(|(d, f)| (format!("{d}:{f}"), RunConfig { lambda_d: d, lambda_f: f, ..base.clone() }))
                .collect(),
            Self::GtbDepth => [0, 3, 6, 9].into_iter().map(|k| (k.to_string(), RunConfig { gtb_depth: k, ..base.clone() })).collect(),
            Self::Beta => [0.5, 1.0, 2.0, 3.0, 5.0].into_iter().map(|b| (b.to_string(), RunConfig { beta: b, ..base.clone() })).collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.as_str()).collect();
            format!("unknown ablation axis `{s}` (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub final_loss_flow: Option<f64>,
    pub final_loss_dist: Option<f64>,
    pub outcome: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub table_path: Option<PathBuf>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},status,final_loss_dist,final_loss_flow,{}\n", self.axis, MetricsReport::CSV_HEADER);
        let blanks = ",".repeat(MetricsReport::CSV_HEADER.matches(',').count());
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let (status, metrics) = match &r.outcome {
                Ok(m) => ("ok".to_string(), m.csv_row()),
                Err(e) => (format!("failed: {}", e.replace([',', '\n'], ";")), blanks.clone()),
            };
            out.push_str(&format!("{},{status},{},{},{metrics}\n", r.label, opt(r.final_loss_dist), opt(r.final_loss_flow)));
        }
        out
    }
}

/// Trains and evaluates one model per setting on `axis`, all from `base.seed`.
///
/// A failing setting is recorded in its row and the sweep continues. With an
/// output directory each run gets `<out>/<axis>/<label>/` and the comparison
/// table lands in `<out>/<axis>/comparison.csv`.
pub fn run_ablation(axis: AblationAxis, base: &RunConfig, train: &Dataset, eval: &Dataset, eval_opts: &EvalOptions, out_dir: Option<&Path>) -> Result<AblationReport> {
    let axis_dir = out_dir.map(|d| d.join(axis.as_str()));
    if let Some(dir) = &axis_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    for (label, cfg) in axis.settings(base) {
        log::info!("ablation {axis} = {label}");
        let run_dir = axis_dir.as_ref().map(|d| d.join(label.replace(':', "-")));
        let run = train_loop(&cfg, train, LoopOptions { out_dir: run_dir, resume: None })
            .and_then(|out| evaluate(&out.state.model, eval, eval_opts).map(|(m, _)| (out.records, m)));
        let row = match run {
            Ok((records, metrics)) => AblationRow {
                label,
                final_loss_flow: records.last().map(|r| r.loss_flow),
                final_loss_dist: records.last().map(|r| r.loss_dist),
                outcome: Ok(metrics),
            },
            Err(e) => {
                log::error!("ablation {axis} = {label} failed: {e}");
                AblationRow { label, final_loss_flow: None, final_loss_dist: None, outcome: Err(e.to_string()) }
            }
        };
        rows.push(row);
    }
    let mut report = AblationReport { axis, rows, table_path: None };
    if let Some(dir) = &axis_dir {
        let path = dir.join("comparison.csv");
        fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        report.table_path = Some(path);
    }
    Ok(report)
}
