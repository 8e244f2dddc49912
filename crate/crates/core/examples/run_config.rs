// SPDX-License-Identifier: MIT OR Apache-2.0

//! Drive the experiment runner from a JSON config, as the CLI does.
//!
//! ```text
//! cargo run --release --example run_config -- [out_dir]
//! ```

use rftlab::harness::{run_experiment, validate_config_text, ExperimentConfig};

const CONFIG: &str = r#"{
  "experiment": "predict",
  "seed": 7,
  "prompt": {"length": 8, "count": 3},
  "grids": {"n_sites": 10, "epsilon": 0.01}
}"#;

fn main() -> rftlab::Result<()> {
    for d in validate_config_text(CONFIG) {
        println!("{d}");
    }
    let mut cfg = ExperimentConfig::from_json(CONFIG)?;
    cfg.output_dir = std::env::args().nth(1).unwrap_or_else(|| "out/predict".into()).into();
    let report = run_experiment(&cfg)?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}
