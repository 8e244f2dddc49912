// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer sweep of prompt-displacement patches on a model trained on the
//! key→value task.
//!
//! ```text
//! cargo run --release --example displacement -- [kv.rftc]
//! ```
//! Without a checkpoint the model is trained first (about ten seconds).

use rftlab::metrics::displacement::layer_sweep;
use rftlab::metrics::PromptPair;
use rftlab::model::checkpoint;
use rftlab::model::task::KvTask;
use rftlab::model::train::{accuracy, train_on_task, TrainConfig};
use rftlab::numeric::{median, RngStream};
use rftlab::{Model, ModelConfig};

fn main() -> rftlab::Result<()> {
    let task = KvTask::new(0, 16, 16)?;
    let model = match std::env::args().nth(1) {
        Some(path) => checkpoint::load(path)?,
        None => train_on_task(&Model::init(ModelConfig::small(0))?, &task, &TrainConfig::default())?.0,
    };
    println!("task accuracy {:.3}", accuracy(&model, &task, 256, 1)?);

    let mut rng = RngStream::new(0).child_named("pairs");
    let eps = [0.25, 0.5, 1.0];
    let mut toward = vec![Vec::new(); model.n_layers() + 1];
    for (id, (ka, kb)) in task.answer_pairs(16, &mut rng).into_iter().enumerate() {
        let (a, b) = task.prompt_pair(ka, kb, &mut rng)?;
        let pair = PromptPair {
            id,
            key_a: task.key_token(ka),
            key_b: task.key_token(kb),
            answer_a: task.answer(ka),
            answer_b: task.answer(kb),
            tokens_a: a,
            tokens_b: b,
        };
        let last = pair.tokens_a.len() - 1;
        for rep in layer_sweep(&model, &pair, last, &eps)? {
            toward[rep.site.layer].push(rep.toward.clone());
            if id == 0 {
                println!(
                    "pair 0 layer {}: f {:.3?}, rank of B's answer {} -> {:?} (clean B {}), angles {:.1?}",
                    rep.site.layer, rep.toward, rep.rank_clean_a, rep.rank_patched_a, rep.rank_clean_b, rep.angles
                );
            }
        }
    }
    for (l, rows) in toward.iter().enumerate() {
        let med: Vec<f64> = (0..eps.len())
            .map(|k| median(&rows.iter().map(|r| r[k]).collect::<Vec<_>>()).unwrap_or(f64::NAN))
            .collect();
        println!("layer {l}: median toward fraction at eps {eps:?} = {med:.3?}");
    }
    Ok(())
}
