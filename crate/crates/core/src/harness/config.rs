// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Site;
use crate::metrics::{SlopeBand, DEFAULT_TAU};
use crate::model::train::TrainConfig;
use crate::model::{ModelConfig, Observable};
use crate::numeric::EPS0;

/// Experiment ids, in the order they appear in the CLI.
pub const EXPERIMENTS: [&str; 9] = [
    "linearity", "predict", "field", "compose", "sites", "green", "displace", "infer", "transfer",
];

/// Where the weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// Fresh deterministic initialization.
    Init(ModelConfig),
    /// A checkpoint file.
    Checkpoint(PathBuf),
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Init(ModelConfig::small(0))
    }
}

/// Key→value task; when present, an initialized model is first trained on it
/// and prompts, observables and pairs are drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Seed of the key→value map; must match the checkpoint's training task.
    #[serde(default)]
    pub seed: u64,
    pub n_keys: usize,
    pub n_vals: usize,
    #[serde(default = "default_facts")]
    pub n_facts: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_facts() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    /// Explicit prompt; otherwise prompts are sampled.
    #[serde(default)]
    pub tokens: Option<Vec<usize>>,
    /// Length of sampled prompts without a task.
    #[serde(default = "default_length")]
    pub length: usize,
    /// Repeat a random block of this many tokens; with a task, a block of
    /// `period / 3` facts repeated up to the context length.
    #[serde(default)]
    pub period: Option<usize>,
    /// Number of prompts for multi-prompt sweeps.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Observable; otherwise the task's answer/distractor pair or a random pair.
    #[serde(default)]
    pub observable: Option<Observable>,
}

fn default_length() -> usize {
    8
}

fn default_count() -> usize {
    4
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            tokens: None,
            length: default_length(),
            period: None,
            count: default_count(),
            observable: None,
        }
    }
}

/// Sweep grids. Amplitudes are fractions of `||R(site)||` when
/// `relative_amplitudes` is set, absolute otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    pub amplitudes: Vec<f64>,
    pub relative_amplitudes: bool,
    pub band: SlopeBand,
    /// Explicit sites; otherwise `n_sites` are sampled.
    pub sites: Option<Vec<Site>>,
    pub n_sites: usize,
    /// Amplitude for prediction and response-field runs.
    pub epsilon: f64,
    /// Absolute amplitudes for the composition test.
    pub compose_epsilons: Vec<f64>,
    pub mid_layers: Option<Vec<usize>>,
    pub pairs: usize,
    pub displace_epsilons: Vec<f64>,
    pub top_k: usize,
    pub green_pairs: Option<Vec<(Site, Site)>>,
    pub sparsity: usize,
    pub lambda_rel: f64,
    pub refine_factor: usize,
    pub depth_window: f64,
    pub fingerprint_rank: usize,
}

impl Default for Grids {
    fn default() -> Self {
        let f = [0.001, 0.0025, 0.005, 0.01, 0.025, 0.05];
        Self {
            amplitudes: f.iter().flat_map(|v| [-v, *v]).collect(),
            relative_amplitudes: true,
            band: SlopeBand::default(),
            sites: None,
            n_sites: 20,
            epsilon: 0.01,
            compose_epsilons: vec![0.1, 0.05, 0.025],
            mid_layers: None,
            pairs: 16,
            displace_epsilons: vec![0.25, 0.5, 1.0],
            top_k: 5,
            green_pairs: None,
            sparsity: 3,
            lambda_rel: crate::inference::DEFAULT_LAMBDA_REL,
            refine_factor: 2,
            depth_window: 0.3,
            fingerprint_rank: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub tau: f64,
    pub eps0: f64,
    pub fd_step: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            eps0: EPS0,
            fd_step: crate::autodiff::DEFAULT_FD_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Fail with a threshold error when a headline metric misses its gate.
    #[serde(default)]
    pub gate: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.into(),
            seed: 0,
            model: ModelSource::default(),
            task: None,
            prompt: PromptSpec::default(),
            grids: Grids::default(),
            thresholds: Thresholds::default(),
            output_dir: default_output(),
            gate: false,
        }
    }

    /// Reduced grids that finish in about a second.
    pub fn quick(experiment: &str) -> Self {
        let mut c = Self::new(experiment);
        c.grids.n_sites = 6;
        c.grids.pairs = 4;
        c.grids.fingerprint_rank = 24;
        c.prompt.count = 2;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Semantic checks; returns warnings, errors on invalid settings.
    pub fn check(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(Error::UnknownExperiment(self.experiment.clone()));
        }
        let g = &self.grids;
        if g.amplitudes.is_empty() || g.amplitudes.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("grids.amplitudes must be nonempty and finite".into()));
        }
        if self.experiment == "linearity" {
            let pos = g.amplitudes.iter().any(|&e| e > 0.0);
            let neg = g.amplitudes.iter().any(|&e| e < 0.0);
            if !(pos && neg) {
                warnings.push("grids.amplitudes does not span both signs; the slope fit is degraded".into());
            }
            let (lo, hi) = g.band.limits(&g.amplitudes);
            let inside = g.amplitudes.iter().filter(|e| **e != 0.0 && e.abs() >= lo && e.abs() <= hi).count();
            if inside < 2 {
                return Err(Error::Config(format!(
                    "grids.band keeps {inside} amplitudes; the slope fit needs at least 2"
                )));
            }
        }
        if !(g.band.lo > 0.0 && g.band.lo <= g.band.hi) {
            return Err(Error::Config("grids.band needs 0 < lo <= hi".into()));
        }
        if g.n_sites == 0 || g.pairs == 0 || g.top_k == 0 || g.sparsity == 0 || self.prompt.count == 0 {
            return Err(Error::Config("site, pair, top_k, sparsity and prompt counts must be at least 1".into()));
        }
        if g.compose_epsilons.is_empty() || g.compose_epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("grids.compose_epsilons must be positive".into()));
        }
        if g.refine_factor == 0 || !(g.depth_window > 0.0) || g.fingerprint_rank == 0 {
            return Err(Error::Config("transfer settings must be positive".into()));
        }
        let t = &self.thresholds;
        if !(t.tau > 0.0 && t.eps0 > 0.0 && t.fd_step > 0.0) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if let Some(p) = self.prompt.period {
            if p == 0 {
                return Err(Error::Config("prompt.period must be at least 1".into()));
            }
            if self.task.is_some() && p % 3 != 0 {
                return Err(Error::Config(format!(
                    "prompt.period {p} must be a multiple of 3 with a task: facts repeat as key, value, separator"
                )));
            }
        }
        if let ModelSource::Init(c) = &self.model {
            c.validate()?;
        }
        Ok(warnings)
    }
}

/// A located message from [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// 1-based; 0 when the location is unknown.
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {sev}: {}", self.line, self.column, self.message)
    }
}

/// Line of the first occurrence of `"key"` in `text`.
fn locate(text: &str, key: &str) -> (usize, usize) {
    let needle = format!("\"{key}\"");
    text.lines()
        .enumerate()
        .find_map(|(i, l)| l.find(&needle).map(|c| (i + 1, c + 1)))
        .unwrap_or((0, 0))
}

/// Diagnostics for config text; empty means valid.
pub fn validate_config_text(text: &str) -> Vec<Diagnostic> {
    let cfg: ExperimentConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            return vec![Diagnostic {
                severity: Severity::Error,
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }]
        }
    };
    let key_of = |msg: &str| {
        ["amplitudes", "band", "compose_epsilons", "period", "experiment", "thresholds", "model"]
            .into_iter()
            .find(|k| msg.contains(k))
            .map_or((0, 0), |k| locate(text, k))
    };
    match cfg.check() {
        Ok(warnings) => warnings
            .into_iter()
            .map(|w| {
                let (line, column) = key_of(&w);
                Diagnostic {
                    severity: Severity::Warning,
                    line,
                    column,
                    message: w,
                }
            })
            .collect(),
        Err(e) => {
            let msg = e.to_string();
            let (line, column) = if matches!(e, Error::UnknownExperiment(_)) {
                locate(text, "experiment")
            } else {
                key_of(&msg)
            };
            vec![Diagnostic {
                severity: Severity::Error,
                line,
                column,
                message: msg,
            }]
        }
    }
}

/// `validate_config`: schema and rule check of a config file; no model evaluation.
pub fn validate_config(path: impl AsRef<Path>) -> Result<Vec<Diagnostic>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(validate_config_text(&text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_clean() {
        assert!(validate_config_text(r#"{"experiment": "linearity"}"#).is_empty());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::new("transfer");
        c.task = Some(TaskSpec {
            seed: 0,
            n_keys: 16,
            n_vals: 16,
            n_facts: 3,
            train: TrainConfig::default(),
        });
        c.grids.sites = Some(vec![Site::new(1, 2)]);
        c.grids.amplitudes = vec![-0.1, 1.0 / 3.0, 0.1];
        c.prompt.observable = Some(Observable::new(3, 4).linear());
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn one_sided_grid_warns() {
        let text = "{\n  \"experiment\": \"linearity\",\n  \"grids\": {\"amplitudes\": [0.01, 0.02, 0.05, 0.1, 1.0]}\n}";
        let d = validate_config_text(text);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
        assert_eq!(d[0].line, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let d = validate_config_text("{\n  \"experiment\": \"field\",\n  \"colour\": 3\n}");
        assert_eq!(d[0].severity, Severity::Error);
        assert!(d[0].message.contains("colour"), "{}", d[0].message);
        assert_eq!(d[0].line, 3);
        let d = validate_config_text(r#"{"experiment": "nope"}"#);
        assert!(d[0].message.contains("nope"));
        let d = validate_config_text("{\"experiment\": \"field\",,}");
        assert!(d[0].line == 1 && d[0].column > 0);
    }
}
