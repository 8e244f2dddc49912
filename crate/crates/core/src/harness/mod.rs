// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch experiment runner.
//!
//! A run reads an [`ExperimentConfig`], builds or loads the model, runs one
//! experiment and writes into the output directory:
//!
//! - one or more CSV files (UTF-8, comma-delimited, header row),
//! - `summary.json` with the headline metrics,
//! - `metadata.json` with the config echo, its SHA-256, the master seed,
//!   every derived seed, the crate version and run notes.
//!
//! CSV schemas (new columns are only ever appended):
//!
//! | file | columns |
//! |------|---------|
//! | `linearity.csv` | epsilon, dy_meas, dy_pred_slope, eta_nl, eta_sup, in_band, site_layer, site_token, fraction |
//! | `predict.csv` | prompt, site_layer, site_token, epsilon, dy_meas, dy_pred, e_abs, e_rel, low_signal, regime |
//! | `field.csv` | d_layer, d_token, mean_response_norm, count |
//! | `compose.csv` | site_layer, site_token, mid_layer, mode, epsilon, eta_comp |
//! | `sites.csv` | prompt, layer, token, score, rank |
//! | `green.csv` | source_layer, source_token, target_layer, target_token, causal, frobenius, mean_abs_diag, mean_abs_offdiag, entries_50, entries_90, entries_99, jvp_vjp_max_diff |
//! | `green_concentration.csv` | pair, k, cumulative |
//! | `displace.csv` | pair, layer, token, epsilon, toward, delta, displacement_norm, angle_answer, angle_key, angle_gradient, rank_clean_a, rank_patched_a, rank_clean_b |
//! | `infer.csv` | problem, site_layer, site_token, amplitude, target, achieved, relative_error, in_band |
//! | `transfer.csv` | pair, source_layer, source_token, target_layer, target_token, weight, expected_layer, within_one |
//!
//! Empty cells mean "undefined" (for example `eta_nl` where the slope is degenerate).

mod config;
mod experiments;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{
    validate_config, validate_config_text, Diagnostic, ExperimentConfig, Grids, ModelSource, PromptSpec, Severity,
    TaskSpec, Thresholds, EXPERIMENTS,
};

use crate::error::{Error, Result};

/// One CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub(crate) fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(&self.header).map_err(|e| csv_error(&path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Locale-free shortest round-trip formatting.
pub(crate) fn num(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Everything an experiment produces before it is written.
#[derive(Debug, Clone, Default)]
pub(crate) struct Outcome {
    pub tables: Vec<Table>,
    pub summary: BTreeMap<String, Value>,
    pub extra_json: Vec<(String, Value)>,
    pub notes: Vec<String>,
    /// Gate checks as `(name, passed, detail)`.
    pub gates: Vec<(String, bool, String)>,
}

impl Outcome {
    pub fn metric(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.insert(key.into(), value.into());
    }

    pub fn gate(&mut self, name: &str, pass: bool, detail: String) {
        self.gates.push((name.into(), pass, detail));
    }
}

/// What [`run_experiment`] wrote.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: Value,
    /// Names of gate checks that failed (reported whether or not gating is on).
    pub failed_gates: Vec<String>,
}

/// SHA-256 of the compact JSON form of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// `run_experiment`: runs `cfg` and writes its outputs.
///
/// With `cfg.gate` set, a failed gate check returns [`Error::Threshold`]
/// after all files have been written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let warnings = cfg.check()?;
    let mut ctx = experiments::Context::build(cfg)?;
    let mut out = experiments::run(&mut ctx)?;
    out.notes.extend(warnings.into_iter().map(|w| format!("config warning: {w}")));
    out.notes.extend(ctx.notes.drain(..));

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for t in &out.tables {
        files.push(t.write(dir)?);
    }
    for (name, v) in &out.extra_json {
        files.push(write_json(dir, name, v)?);
    }
    let failed: Vec<String> = out.gates.iter().filter(|g| !g.1).map(|g| g.0.clone()).collect();
    let gates: Vec<Value> = out
        .gates
        .iter()
        .map(|(n, p, d)| json!({"name": n, "pass": p, "detail": d}))
        .collect();
    let summary = json!({
        "experiment": cfg.experiment,
        "metrics": out.summary,
        "gates": gates,
    });
    files.push(write_json(dir, "summary.json", &summary)?);
    let metadata = json!({
        "experiment": cfg.experiment,
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_hash(cfg)?,
        "master_seed": cfg.seed,
        "derived_seeds": ctx.seeds,
        "model": ctx.model_info(),
        "outputs": files.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "notes": out.notes,
        "config": cfg,
    });
    files.push(write_json(dir, "metadata.json", &metadata)?);

    if cfg.gate && !failed.is_empty() {
        return Err(Error::Threshold(format!("{} failed: {}", cfg.experiment, failed.join(", "))));
    }
    Ok(RunReport {
        output_dir: dir.clone(),
        files,
        summary,
        failed_gates: failed,
    })
}
