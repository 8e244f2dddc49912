// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains the small model on the key→value task and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_kv -- [out.rftc] [steps]
//! ```

use rftlab::model::checkpoint;
use rftlab::model::task::KvTask;
use rftlab::model::train::{train_on_task, TrainConfig};
use rftlab::{Model, ModelConfig};

fn main() -> rftlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "kv.rftc".into());
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(600);

    let model = Model::init(ModelConfig::small(0))?;
    let task = KvTask::new(0, 16, 16)?;
    let cfg = TrainConfig { steps, ..Default::default() };
    let start = std::time::Instant::now();
    let (trained, report) = train_on_task(&model, &task, &cfg)?;
    for (i, loss) in report.losses.iter().enumerate().step_by((steps / 10).max(1)) {
        println!("step {i:>5}  loss {loss:.4}");
    }
    println!(
        "final loss {:.4}, accuracy {:.3}, {:.1}s",
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.final_accuracy,
        start.elapsed().as_secs_f64()
    );
    checkpoint::save(&trained, &out)?;
    println!("saved {out}");
    Ok(())
}
