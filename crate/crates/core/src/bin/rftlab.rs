// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line runner for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rftlab::harness::{run_experiment, validate_config, ExperimentConfig, Severity, EXPERIMENTS};
use rftlab::Result;

#[derive(Parser)]
#[command(name = "rftlab", version, about = "Residual-field response experiments")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, env = "RFT_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, env = "RFT_OUT")]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, env = "RFT_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "RFT_THREADS")]
    threads: Option<usize>,
    /// Exit with status 3 when a headline metric misses its threshold.
    #[arg(long, global = true)]
    gate: bool,
    /// Reduced grids when no config is given.
    #[arg(long, global = true)]
    quick: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linearity and superposition sweeps.
    Linearity,
    /// Gradient prediction of patch effects.
    Predict,
    /// Downstream response field binned by offset.
    Field,
    /// Composition test across a middle layer.
    Compose,
    /// Site scores and concentration.
    Sites,
    /// Green slices between site pairs.
    Green,
    /// Prompt displacement and toward fractions.
    Displace,
    /// Patch inference for scalar and field targets.
    Infer,
    /// Cross-depth response transfer.
    Transfer,
    /// Run the experiment named in the config.
    Run,
    /// Check a config file without running anything.
    Validate {
        /// Config path; defaults to --config.
        path: Option<PathBuf>,
    },
}

impl Command {
    fn experiment(&self) -> Option<&'static str> {
        let id = match self {
            Command::Linearity => "linearity",
            Command::Predict => "predict",
            Command::Field => "field",
            Command::Compose => "compose",
            Command::Sites => "sites",
            Command::Green => "green",
            Command::Displace => "displace",
            Command::Infer => "infer",
            Command::Transfer => "transfer",
            Command::Run | Command::Validate { .. } => return None,
        };
        debug_assert!(EXPERIMENTS.contains(&id));
        Some(id)
    }
}

fn validate(path: PathBuf) -> Result<u8> {
    let diags = validate_config(&path)?;
    let errors = diags.iter().filter(|d| d.severity == Severity::Error).count();
    for d in &diags {
        println!("{}:{d}", path.display());
    }
    if errors == 0 {
        println!("{}: ok ({} warnings)", path.display(), diags.len());
    }
    Ok(u8::from(errors > 0))
}

fn execute(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| rftlab::Error::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Validate { path } = &cli.command {
        let path = path
            .clone()
            .or(cli.config.clone())
            .ok_or_else(|| rftlab::Error::Config("validate needs a config path".into()))?;
        return validate(path);
    }
    let mut cfg = match (&cli.config, cli.command.experiment()) {
        (Some(p), id) => {
            let mut c = ExperimentConfig::load(p)?;
            if let Some(id) = id {
                c.experiment = id.into();
            }
            c
        }
        (None, Some(id)) if cli.quick => ExperimentConfig::quick(id),
        (None, Some(id)) => ExperimentConfig::new(id),
        (None, None) => return Err(rftlab::Error::Config("run needs --config".into())),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.gate |= cli.gate;
    let report = run_experiment(&cfg)?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    println!("{}", serde_json::to_string_pretty(&report.summary["metrics"]).unwrap_or_default());
    for g in report.summary["gates"].as_array().into_iter().flatten() {
        let pass = g["pass"].as_bool().unwrap_or(false);
        println!("{} {}: {}", if pass { "pass" } else { "FAIL" }, g["name"].as_str().unwrap_or(""), g["detail"].as_str().unwrap_or(""));
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
