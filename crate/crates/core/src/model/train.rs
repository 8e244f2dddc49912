// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal trainer for the key→value task.
//!
//! Loss is cross-entropy of the answer token at the final position. The
//! optimizer is Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`,
//! bias-corrected moments, a constant learning rate and no weight decay.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::task::KvTask;
use crate::model::{block, Model, Parameters};
use crate::numeric::{axpy, ln_stats, outer_acc, softmax_in_place, vec_mat, vec_mat_t, RngStream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean batch loss at each step.
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
}

/// Cross-entropy of `answer` at the final position and its parameter gradient.
pub fn loss_and_grad(model: &Model, tokens: &[usize], answer: usize) -> Result<(f64, Parameters)> {
    let trace = model.trace(tokens)?;
    let n = tokens.len();
    let d = model.width();
    let v = model.config.vocab_size;
    let last = n - 1;
    let top = model.n_layers();
    let mut grads = model.params.zeros_like();

    let r = trace.residuals.at(top, last);
    let st = ln_stats(r, model.config.ln_eps);
    let xhat: Vec<f64> = r.iter().map(|&x| (x - st.mean) * st.rstd).collect();
    let gain = model.params.final_ln_gain.data();
    let z: Vec<f64> = (0..d).map(|i| gain[i] * xhat[i] + model.params.final_ln_bias.data()[i]).collect();
    let mut probs = vec![0.0; v];
    vec_mat(&z, model.params.unembedding.data(), &mut probs);
    softmax_in_place(&mut probs);
    let loss = -probs[answer].max(f64::MIN_POSITIVE).ln();

    let mut g_logits = probs;
    g_logits[answer] -= 1.0;
    outer_acc(&z, &g_logits, grads.unembedding.data_mut());
    let mut g_z = vec![0.0; d];
    vec_mat_t(&g_logits, model.params.unembedding.data(), &mut g_z);
    let mut g_xhat = vec![0.0; d];
    for i in 0..d {
        grads.final_ln_gain.data_mut()[i] += g_z[i] * xhat[i];
        grads.final_ln_bias.data_mut()[i] += g_z[i];
        g_xhat[i] = g_z[i] * gain[i];
    }
    let mut g_state = vec![0.0; n * d];
    let mut tmp = vec![0.0; d];
    let mean_g = g_xhat.iter().sum::<f64>() / d as f64;
    let mean_xg = crate::numeric::dot(&xhat, &g_xhat) / d as f64;
    for i in 0..d {
        tmp[i] = st.rstd * (g_xhat[i] - mean_g - xhat[i] * mean_xg);
    }
    g_state[last * d..(last + 1) * d].copy_from_slice(&tmp);

    for layer in (1..=top).rev() {
        let b = layer - 1;
        g_state = block::backward(
            &model.config,
            &model.params.blocks[b],
            &trace.blocks[b],
            &g_state,
            n,
            Some(&mut grads.blocks[b]),
        );
    }
    for (x, &t) in tokens.iter().enumerate() {
        let g = &g_state[x * d..(x + 1) * d];
        axpy(1.0, g, &mut grads.token_embedding.data_mut()[t * d..(t + 1) * d]);
        axpy(1.0, g, &mut grads.position_embedding.data_mut()[x * d..(x + 1) * d]);
    }
    Ok((loss, grads))
}

/// Fraction of `count` sampled prompts whose final-position argmax is the answer.
pub fn accuracy(model: &Model, task: &KvTask, count: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed).child_named("accuracy");
    let prompts: Vec<(Vec<usize>, usize)> = (0..count).map(|_| task.sample(&mut rng)).collect();
    let hits: Vec<bool> = prompts
        .par_iter()
        .map(|(tokens, key)| -> Result<bool> {
            let out = model.forward(tokens)?;
            let row = out.logits.row(tokens.len() - 1);
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            Ok(argmax == task.answer(*key))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / count.max(1) as f64)
}

/// `train_on_task`: Adam on the answer-token cross-entropy.
pub fn train_on_task(model: &Model, task: &KvTask, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if task.vocab_needed() > model.config.vocab_size {
        return Err(Error::Config(format!(
            "task needs {} tokens, model vocabulary has {}",
            task.vocab_needed(),
            model.config.vocab_size
        )));
    }
    if task.prompt_len() > model.config.n_ctx {
        return Err(Error::Config(format!(
            "prompts of {} tokens exceed n_ctx = {}",
            task.prompt_len(),
            model.config.n_ctx
        )));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("training needs batch >= 1 and lr > 0".into()));
    }
    let mut model = model.clone();
    let mut m1 = model.params.zeros_like();
    let mut m2 = model.params.zeros_like();
    let mut rng = RngStream::new(cfg.seed).child_named("train-batches");
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<(Vec<usize>, usize)> = (0..cfg.batch)
            .map(|_| {
                let (t, k) = task.sample(&mut rng);
                (t, task.answer(k))
            })
            .collect();
        let results: Vec<(f64, Parameters)> = batch
            .par_iter()
            .map(|(t, a)| loss_and_grad(&model, t, *a))
            .collect::<Result<_>>()?;
        // Sequential reduction keeps the sum order fixed.
        let mut loss = 0.0;
        let mut grads = model.params.zeros_like();
        for (l, g) in &results {
            loss += l;
            for (acc, gt) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                axpy(1.0, gt.1.data(), acc.data_mut());
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);

        let t = (step + 1) as i32;
        let c1 = 1.0 / (1.0 - ADAM_BETA1.powi(t));
        let c2 = 1.0 / (1.0 - ADAM_BETA2.powi(t));
        let params = model.params.tensors_mut();
        for (((p, g), a), b) in params
            .into_iter()
            .zip(grads.tensors_mut())
            .zip(m1.tensors_mut())
            .zip(m2.tensors_mut())
        {
            let (p, g, a, b) = (p.data_mut(), g.data(), a.data_mut(), b.data_mut());
            for i in 0..p.len() {
                let gi = g[i] * inv;
                a[i] = ADAM_BETA1 * a[i] + (1.0 - ADAM_BETA1) * gi;
                b[i] = ADAM_BETA2 * b[i] + (1.0 - ADAM_BETA2) * gi * gi;
                p[i] -= cfg.lr * (a[i] * c1) / ((b[i] * c2).sqrt() + ADAM_EPS);
            }
        }
    }
    if !model.params.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    let final_accuracy = accuracy(&model, task, 256, cfg.seed ^ 0xACC)?;
    Ok((
        model,
        TrainReport {
            steps: cfg.steps,
            losses,
            final_accuracy,
        },
    ))
}
