// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder-only transformer with full residual capture.
//!
//! Each block applies `R += s * Attn(LN1(R))` then `R += s * MLP(LN2(R))`,
//! where `s` is [`ModelConfig::residual_scale`] (1 for an ordinary model,
//! `1/k` after a `k`-fold depth refinement). Logits are
//! `unembed(LN_f(R_L))`, or `unembed(R_L)` in the linear-readout
//! diagnostic mode.

pub(crate) mod block;
pub mod checkpoint;
pub mod task;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, ResidualField, Site};
use crate::numeric::{ln_stats, vec_mat, RngStream, Tensor};

pub use block::BlockParams;
pub(crate) use block::BlockCache;

/// Standard deviation of every weight matrix at initialization.
pub const INIT_STD: f64 = 0.02;

fn default_residual_scale() -> f64 {
    1.0
}

/// Architecture and initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_ctx: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub ln_eps: f64,
    pub seed: u64,
    /// Multiplier on every block's residual update.
    #[serde(default = "default_residual_scale")]
    pub residual_scale: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, width 32, 4 heads, 16 tokens, 64-word vocabulary.
    pub fn small(seed: u64) -> Self {
        Self {
            n_layers: 4,
            n_ctx: 16,
            d_model: 32,
            n_heads: 4,
            d_mlp: 128,
            vocab_size: 64,
            ln_eps: 1e-5,
            seed,
            residual_scale: 1.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Depth-time of layer `l` with total depth `total_time`: `t_l = l * total_time / L`.
    pub fn depth_time(&self, layer: usize, total_time: f64) -> f64 {
        if self.n_layers == 0 {
            0.0
        } else {
            layer as f64 * total_time / self.n_layers as f64
        }
    }

    /// Normalized depth `s = l / L` (0 for a model without blocks).
    pub fn normalized_depth(&self, layer: usize) -> f64 {
        self.depth_time(layer, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_ctx", self.n_ctx),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale.is_finite()) {
            return Err(Error::Config(format!(
                "residual_scale must be positive, got {}",
                self.residual_scale
            )));
        }
        Ok(())
    }
}

/// All weights of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `[V, d]`
    pub token_embedding: Tensor,
    /// `[n_ctx, d]`
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    /// `[d, V]`
    pub unembedding: Tensor,
}

impl Parameters {
    /// Deterministic initialization: weights `N(0, 0.02²)`, gains 1, biases 0.
    ///
    /// Each tensor draws from its own child stream keyed by its manifest
    /// name, so adding a tensor never perturbs the others.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let w = |name: &str, shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut root.child_named(name));
        let blocks = (0..config.n_layers)
            .map(|i| BlockParams::init(config, &|n, s| w(&format!("blocks.{i}.{n}"), s)))
            .collect();
        Ok(Self {
            token_embedding: w("token_embedding", &[v, d]),
            position_embedding: w("position_embedding", &[config.n_ctx, d]),
            blocks,
            final_ln_gain: Tensor::filled(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
            unembedding: w("unembedding", &[d, v]),
        })
    }

    /// Same shapes, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            token_embedding: z(&self.token_embedding),
            position_embedding: z(&self.position_embedding),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            final_ln_gain: z(&self.final_ln_gain),
            final_ln_bias: z(&self.final_ln_bias),
            unembedding: z(&self.unembedding),
        }
    }

    /// Named tensors in manifest order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_ln_gain".to_string(), &self.final_ln_gain));
        out.push(("final_ln_bias".to_string(), &self.final_ln_bias));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    /// Mutable tensors in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out.push(&mut self.unembedding);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::expected_shapes(config);
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != at.shape() {
                return Err(Error::Config(format!(
                    "tensor {an} has shape {:?}, expected {en} with shape {es:?}",
                    at.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, v, m) = (config.d_model, config.vocab_size, config.d_mlp);
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("position_embedding".to_string(), vec![config.n_ctx, d]),
        ];
        for i in 0..config.n_layers {
            for (name, shape) in BlockParams::shapes(d, m) {
                out.push((format!("blocks.{i}.{name}"), shape));
            }
        }
        out.push(("final_ln_gain".to_string(), vec![d]));
        out.push(("final_ln_bias".to_string(), vec![d]));
        out.push(("unembedding".to_string(), vec![d, v]));
        out
    }
}

/// How logits are read from the final residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    /// `unembed(LN_f(R_L))`, the ordinary model output.
    #[default]
    LayerNorm,
    /// `unembed(R_L)`: bypasses the final layer norm so a final-layer patch
    /// moves the observable exactly linearly.
    Linear,
}

/// Scalar logit difference `logit(target) - logit(reference)` at one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observable {
    pub target: usize,
    pub reference: usize,
    /// Readout position; `None` means the last token.
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default)]
    pub readout: ReadoutMode,
}

impl Observable {
    pub fn new(target: usize, reference: usize) -> Self {
        Self {
            target,
            reference,
            position: None,
            readout: ReadoutMode::LayerNorm,
        }
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = Some(position);
        self
    }

    pub fn linear(mut self) -> Self {
        self.readout = ReadoutMode::Linear;
        self
    }

    /// Resolved readout position for a sequence of `len` tokens.
    pub fn readout_position(&self, len: usize) -> usize {
        self.position.unwrap_or(len.saturating_sub(1))
    }

    pub fn validate(&self, vocab: usize, len: usize) -> Result<()> {
        if self.target >= vocab || self.reference >= vocab {
            return Err(Error::OutOfRange(format!(
                "observable tokens ({}, {}) outside vocabulary of {vocab}",
                self.target, self.reference
            )));
        }
        let pos = self.readout_position(len);
        if len == 0 || pos >= len {
            return Err(Error::OutOfRange(format!(
                "readout position {pos} outside sequence of {len} tokens"
            )));
        }
        Ok(())
    }
}

/// `logit(target) - logit(reference)` at the observable's readout position.
pub fn read_observable(logits: &Tensor, obs: &Observable) -> Result<f64> {
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    obs.validate(v, n)?;
    let row = logits.row(obs.readout_position(n));
    Ok(row[obs.target] - row[obs.reference])
}

/// Additive perturbations applied to block outputs during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Injections {
    entries: Vec<(Site, Vec<f64>)>,
}

impl Injections {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `delta` to `R_{site.layer}(site.token)` right after it is computed.
    pub fn add(&mut self, site: Site, delta: Vec<f64>) {
        self.entries.push((site, delta));
    }

    /// Adds a whole `[n * d]` token row at `layer`.
    pub fn add_layer(&mut self, layer: usize, row: &[f64], width: usize) {
        for (x, chunk) in row.chunks(width).enumerate() {
            if chunk.iter().any(|&v| v != 0.0) {
                self.add(Site::new(layer, x), chunk.to_vec());
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Site, Vec<f64>)] {
        &self.entries
    }

    /// Lowest layer touched.
    pub fn min_layer(&self) -> Option<usize> {
        self.entries.iter().map(|(s, _)| s.layer).min()
    }

    fn apply(&self, layer: usize, state: &mut [f64], width: usize) {
        for (site, delta) in &self.entries {
            if site.layer == layer {
                let row = &mut state[site.token * width..(site.token + 1) * width];
                for (r, d) in row.iter_mut().zip(delta) {
                    *r += d;
                }
            }
        }
    }
}

/// Logits plus the captured residual stream.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n, V]`, standard readout.
    pub logits: Tensor,
    pub residuals: ResidualField,
}

/// Forward pass with every intermediate retained, for differentiation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub tokens: usize,
    pub residuals: ResidualField,
    pub blocks: Vec<BlockCache>,
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// `init_model`: deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = Parameters::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn width(&self) -> usize {
        self.config.d_model
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Config("empty token sequence".into()));
        }
        if tokens.len() > self.config.n_ctx {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds n_ctx = {}",
                tokens.len(),
                self.config.n_ctx
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn check_site(&self, site: Site, n_tokens: usize) -> Result<()> {
        if site.layer > self.config.n_layers || site.token >= n_tokens {
            return Err(Error::OutOfRange(format!(
                "site {site} outside grid of {} layers x {n_tokens} tokens",
                self.config.n_layers + 1
            )));
        }
        Ok(())
    }

    /// Token + position embedding, `[n * d]`.
    pub(crate) fn embed(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.width();
        let mut out = vec![0.0; tokens.len() * d];
        for (x, &t) in tokens.iter().enumerate() {
            let row = &mut out[x * d..(x + 1) * d];
            let te = self.params.token_embedding.row(t);
            let pe = self.params.position_embedding.row(x);
            for i in 0..d {
                row[i] = te[i] + pe[i];
            }
        }
        out
    }

    /// Clean forward pass.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        self.run(tokens, &Injections::new())
    }

    /// Forward pass with additive injections at block outputs.
    pub fn run(&self, tokens: &[usize], injections: &Injections) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        self.check_injections(injections, tokens.len())?;
        let n = tokens.len();
        let mut residuals = ResidualField(Field::zeros(self.n_layers() + 1, n, self.width()));
        let mut state = self.embed(tokens);
        injections.apply(0, &mut state, self.width());
        residuals.layer_mut(0).copy_from_slice(&state);
        self.propagate(&mut residuals, 0, injections)?;
        let logits = self.logits(&residuals, ReadoutMode::LayerNorm);
        Ok(ForwardOutput { logits, residuals })
    }

    /// Recomputes every layer above `start_layer`, taking layers `0..=start_layer`
    /// from `residuals`. Injections at `start_layer` are added to the copied slice.
    pub fn resume_from(
        &self,
        residuals: &ResidualField,
        start_layer: usize,
        injections: &Injections,
    ) -> Result<ForwardOutput> {
        let n = residuals.tokens();
        if start_layer > self.n_layers() || residuals.layers() != self.n_layers() + 1 {
            return Err(Error::OutOfRange(format!(
                "cannot resume at layer {start_layer} of a {}-layer model",
                self.n_layers()
            )));
        }
        self.check_injections(injections, n)?;
        if let Some(min) = injections.min_layer() {
            if min < start_layer {
                return Err(Error::Config(format!(
                    "injection at layer {min} precedes resume layer {start_layer}"
                )));
            }
        }
        let mut out = residuals.clone();
        let d = self.width();
        injections.apply(start_layer, out.layer_mut(start_layer), d);
        self.propagate(&mut out, start_layer, injections)?;
        let logits = self.logits(&out, ReadoutMode::LayerNorm);
        Ok(ForwardOutput {
            logits,
            residuals: out,
        })
    }

    fn check_injections(&self, injections: &Injections, n: usize) -> Result<()> {
        for (site, delta) in injections.entries() {
            self.check_site(*site, n)?;
            if delta.len() != self.width() {
                return Err(Error::Config(format!(
                    "injection at {site} has length {}, expected {}",
                    delta.len(),
                    self.width()
                )));
            }
        }
        Ok(())
    }

    /// Runs blocks `start+1..=L`, reading layer `start` from `residuals`.
    fn propagate(&self, residuals: &mut ResidualField, start: usize, injections: &Injections) -> Result<()> {
        let n = residuals.tokens();
        let d = self.width();
        for layer in start + 1..=self.n_layers() {
            let input = residuals.layer(layer - 1).to_vec();
            let mut output = block::forward(&self.config, &self.params.blocks[layer - 1], &input, n, None);
            injections.apply(layer, &mut output, d);
            residuals.layer_mut(layer).copy_from_slice(&output);
        }
        if let Some(site) = residuals.first_non_finite() {
            return Err(Error::NonFinite(format!("residual stream at site {site}")));
        }
        Ok(())
    }

    /// Forward pass retaining block caches.
    pub(crate) fn trace(&self, tokens: &[usize]) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.width();
        let mut residuals = ResidualField(Field::zeros(self.n_layers() + 1, n, d));
        residuals.layer_mut(0).copy_from_slice(&self.embed(tokens));
        let mut caches = Vec::with_capacity(self.n_layers());
        for layer in 1..=self.n_layers() {
            let input = residuals.layer(layer - 1).to_vec();
            let mut cache = BlockCache::default();
            let out = block::forward(&self.config, &self.params.blocks[layer - 1], &input, n, Some(&mut cache));
            residuals.layer_mut(layer).copy_from_slice(&out);
            caches.push(cache);
        }
        if let Some(site) = residuals.first_non_finite() {
            return Err(Error::NonFinite(format!("residual stream at site {site}")));
        }
        Ok(Trace {
            tokens: n,
            residuals,
            blocks: caches,
        })
    }

    /// Logits at every position from the final residual layer.
    pub fn logits(&self, residuals: &ResidualField, mode: ReadoutMode) -> Tensor {
        let n = residuals.tokens();
        let v = self.config.vocab_size;
        let mut data = vec![0.0; n * v];
        for x in 0..n {
            let row = self.logits_row(residuals.at(self.n_layers(), x), mode);
            data[x * v..(x + 1) * v].copy_from_slice(&row);
        }
        Tensor::from_vec(&[n, v], data).expect("logit shape")
    }

    /// Logits for a single final-layer residual vector.
    pub fn logits_row(&self, r: &[f64], mode: ReadoutMode) -> Vec<f64> {
        let mut out = vec![0.0; self.config.vocab_size];
        match mode {
            ReadoutMode::Linear => vec_mat(r, self.params.unembedding.data(), &mut out),
            ReadoutMode::LayerNorm => {
                let z = self.final_norm(r);
                vec_mat(&z, self.params.unembedding.data(), &mut out);
            }
        }
        out
    }

    pub(crate) fn final_norm(&self, r: &[f64]) -> Vec<f64> {
        let st = ln_stats(r, self.config.ln_eps);
        let g = self.params.final_ln_gain.data();
        let b = self.params.final_ln_bias.data();
        r.iter()
            .enumerate()
            .map(|(i, &v)| g[i] * (v - st.mean) * st.rstd + b[i])
            .collect()
    }

    /// Observable value computed from a residual field.
    pub fn observe(&self, residuals: &ResidualField, obs: &Observable) -> Result<f64> {
        let n = residuals.tokens();
        obs.validate(self.config.vocab_size, n)?;
        let row = self.logits_row(residuals.at(self.n_layers(), obs.readout_position(n)), obs.readout);
        let y = row[obs.target] - row[obs.reference];
        if !y.is_finite() {
            return Err(Error::NonFinite("observable".into()));
        }
        Ok(y)
    }

    /// Observable of the clean run on `tokens`.
    pub fn observable(&self, tokens: &[usize], obs: &Observable) -> Result<f64> {
        let out = self.forward(tokens)?;
        self.observe(&out.residuals, obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
        let mut r = RngStream::new(seed);
        (0..n).map(|_| r.below(vocab)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::small(0)).unwrap();
        let b = Model::init(ModelConfig::small(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config.head_dim(), 8);
        let c = Model::init(ModelConfig::small(1)).unwrap();
        assert_ne!(a.params.unembedding, c.params.unembedding);
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut c = ModelConfig::small(0);
        c.n_heads = 5;
        assert!(matches!(Model::init(c), Err(Error::Config(_))));
        let mut c = ModelConfig::small(0);
        c.d_model = 0;
        assert!(Model::init(c).is_err());
    }

    #[test]
    fn init_weight_variance() {
        let m = Model::init(ModelConfig::small(3)).unwrap();
        let w = m.params.unembedding.data();
        assert!(w.len() >= 2048);
        // Pool every matrix to exceed 10^4 samples.
        let all: Vec<f64> = m
            .params
            .tensors()
            .iter()
            .filter(|(n, t)| t.shape().len() == 2 && !n.contains("ln"))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert!(all.len() >= 10_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((var - 4e-4).abs() < 0.2 * 4e-4, "variance {var}");
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = Model::init(ModelConfig::small(0)).unwrap();
        let t = tokens(8, 64, 1);
        let out = m.forward(&t).unwrap();
        assert_eq!(out.logits.shape(), &[8, 64]);
        assert_eq!((out.residuals.layers(), out.residuals.tokens(), out.residuals.width()), (5, 8, 32));
        assert!(m.forward(&tokens(17, 64, 1)).is_err());
        assert!(matches!(m.forward(&[64]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn zero_layer_model_is_unembedded_embedding() {
        let mut c = ModelConfig::small(5);
        c.n_layers = 0;
        let m = Model::init(c).unwrap();
        let t = tokens(6, 64, 2);
        let out = m.forward(&t).unwrap();
        // Oracle: explicit embedding + layer norm + unembedding, no block loop.
        for (x, &tok) in t.iter().enumerate() {
            let e: Vec<f64> = (0..32)
                .map(|i| m.params.token_embedding.row(tok)[i] + m.params.position_embedding.row(x)[i])
                .collect();
            let z = crate::numeric::layer_norm(
                &e,
                m.params.final_ln_gain.data(),
                m.params.final_ln_bias.data(),
                m.config.ln_eps,
            )
            .unwrap();
            for v in 0..64 {
                let expected: f64 = (0..32).map(|i| z[i] * m.params.unembedding.data()[i * 64 + v]).sum();
                assert!((out.logits.row(x)[v] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_truncation_preserves_logits() {
        let m = Model::init(ModelConfig::small(0)).unwrap();
        let t = tokens(10, 64, 9);
        let full = m.forward(&t).unwrap();
        for k in 1..t.len() {
            let part = m.forward(&t[..k]).unwrap();
            for x in 0..k {
                for (a, b) in part.logits.row(x).iter().zip(full.logits.row(x)) {
                    assert!((a - b).abs() < 1e-12);
                }
                for l in 0..=m.n_layers() {
                    assert_eq!(part.residuals.at(l, x), full.residuals.at(l, x));
                }
            }
        }
    }

    #[test]
    fn resume_reproduces_downstream() {
        let m = Model::init(ModelConfig::small(2)).unwrap();
        let t = tokens(9, 64, 4);
        let clean = m.forward(&t).unwrap();
        for l in 0..=m.n_layers() {
            let again = m.resume_from(&clean.residuals, l, &Injections::new()).unwrap();
            let diff = again.residuals.diff(&clean.residuals).norm();
            assert!(diff < 1e-12, "layer {l}: {diff}");
        }
    }

    #[test]
    fn read_observable_examples() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 2.0, 0.5, 1.0]).unwrap();
        assert_eq!(read_observable(&logits, &Observable::new(0, 1)).unwrap(), 1.5);
        assert_eq!(read_observable(&logits, &Observable::new(2, 2)).unwrap(), 0.0);
        assert!(read_observable(&logits, &Observable::new(3, 1)).is_err());
        assert!(read_observable(&logits, &Observable::new(0, 1).at(2)).is_err());
    }
}
