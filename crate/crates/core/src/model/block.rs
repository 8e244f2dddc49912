// SPDX-License-Identifier: MIT OR Apache-2.0

//! One pre-norm transformer block with hand-derived reverse (VJP) and
//! forward (JVP) derivatives.

use crate::model::ModelConfig;
use crate::numeric::{axpy, dot, gelu, gelu_grad, ln_stats, outer_acc, vec_mat, vec_mat_t, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `[d, d_mlp]`
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    /// `[d_mlp, d]`
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl BlockParams {
    pub(crate) fn shapes(d: usize, m: usize) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("ln1_gain", vec![d]),
            ("ln1_bias", vec![d]),
            ("w_q", vec![d, d]),
            ("b_q", vec![d]),
            ("w_k", vec![d, d]),
            ("b_k", vec![d]),
            ("w_v", vec![d, d]),
            ("b_v", vec![d]),
            ("w_o", vec![d, d]),
            ("b_o", vec![d]),
            ("ln2_gain", vec![d]),
            ("ln2_bias", vec![d]),
            ("w_fc", vec![d, m]),
            ("b_fc", vec![m]),
            ("w_proj", vec![m, d]),
            ("b_proj", vec![d]),
        ]
    }

    pub(crate) fn init(config: &ModelConfig, weight: &dyn Fn(&str, &[usize]) -> Tensor) -> Self {
        let (d, m) = (config.d_model, config.d_mlp);
        let ones = |n| Tensor::filled(&[n], 1.0);
        let zeros = |n| Tensor::zeros(&[n]);
        Self {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            w_q: weight("w_q", &[d, d]),
            b_q: zeros(d),
            w_k: weight("w_k", &[d, d]),
            b_k: zeros(d),
            w_v: weight("w_v", &[d, d]),
            b_v: zeros(d),
            w_o: weight("w_o", &[d, d]),
            b_o: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w_fc: weight("w_fc", &[d, m]),
            b_fc: zeros(m),
            w_proj: weight("w_proj", &[m, d]),
            b_proj: zeros(d),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        out
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// Intermediates of one block forward pass, all row-major over tokens.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub xhat1: Vec<f64>,
    pub rstd1: Vec<f64>,
    pub a1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `[heads][n][n]`, zero above the diagonal.
    pub probs: Vec<f64>,
    /// Concatenated head outputs before `w_o`.
    pub heads: Vec<f64>,
    pub xhat2: Vec<f64>,
    pub rstd2: Vec<f64>,
    pub a2: Vec<f64>,
    pub pre_act: Vec<f64>,
    pub post_act: Vec<f64>,
}

fn layer_norm_rows(
    input: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    xhat: &mut Vec<f64>,
    rstd: &mut Vec<f64>,
) -> Vec<f64> {
    let n = input.len() / d;
    xhat.clear();
    xhat.resize(n * d, 0.0);
    rstd.clear();
    let mut out = vec![0.0; n * d];
    for x in 0..n {
        let row = &input[x * d..(x + 1) * d];
        let st = ln_stats(row, eps);
        rstd.push(st.rstd);
        for i in 0..d {
            let xh = (row[i] - st.mean) * st.rstd;
            xhat[x * d + i] = xh;
            out[x * d + i] = gain[i] * xh + bias[i];
        }
    }
    out
}

/// Derivative of `v -> (v - mean) * rstd` applied to `t`. The operator
/// `rstd (I - 11ᵀ/d - x̂x̂ᵀ/d)` is symmetric, so the same map serves JVP and VJP.
fn ln_linearized(xhat: &[f64], rstd: f64, t: &[f64], out: &mut [f64]) {
    let d = t.len() as f64;
    let mean_t = t.iter().sum::<f64>() / d;
    let mean_xt = dot(xhat, t) / d;
    for i in 0..t.len() {
        out[i] = rstd * (t[i] - mean_t - xhat[i] * mean_xt);
    }
}

fn linear_rows(x: &[f64], in_dim: usize, w: &Tensor, b: Option<&Tensor>, out_dim: usize) -> Vec<f64> {
    let n = x.len() / in_dim;
    let mut out = vec![0.0; n * out_dim];
    for r in 0..n {
        let o = &mut out[r * out_dim..(r + 1) * out_dim];
        vec_mat(&x[r * in_dim..(r + 1) * in_dim], w.data(), o);
        if let Some(b) = b {
            axpy(1.0, b.data(), o);
        }
    }
    out
}

fn linear_rows_t(g: &[f64], out_dim: usize, w: &Tensor, in_dim: usize) -> Vec<f64> {
    let n = g.len() / out_dim;
    let mut out = vec![0.0; n * in_dim];
    for r in 0..n {
        vec_mat_t(&g[r * out_dim..(r + 1) * out_dim], w.data(), &mut out[r * in_dim..(r + 1) * in_dim]);
    }
    out
}

/// Block forward over an `[n * d]` input; fills `cache` when given.
pub(crate) fn forward(
    config: &ModelConfig,
    p: &BlockParams,
    input: &[f64],
    n: usize,
    cache: Option<&mut BlockCache>,
) -> Vec<f64> {
    let d = config.d_model;
    let m = config.d_mlp;
    let heads = config.n_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let s = config.residual_scale;

    let mut local = BlockCache::default();
    let c = match cache {
        Some(c) => c,
        None => &mut local,
    };

    c.a1 = layer_norm_rows(
        input,
        d,
        p.ln1_gain.data(),
        p.ln1_bias.data(),
        config.ln_eps,
        &mut c.xhat1,
        &mut c.rstd1,
    );
    c.q = linear_rows(&c.a1, d, &p.w_q, Some(&p.b_q), d);
    c.k = linear_rows(&c.a1, d, &p.w_k, Some(&p.b_k), d);
    c.v = linear_rows(&c.a1, d, &p.w_v, Some(&p.b_v), d);

    c.probs = vec![0.0; heads * n * n];
    c.heads = vec![0.0; n * d];
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let hs = h * hd..(h + 1) * hd;
        for x in 0..n {
            let qx = &c.q[x * d..][hs.clone()];
            for y in 0..=x {
                scores[y] = dot(qx, &c.k[y * d..][hs.clone()]) * scale;
            }
            crate::numeric::softmax_in_place(&mut scores[..=x]);
            let prow = &mut c.probs[(h * n + x) * n..(h * n + x + 1) * n];
            prow[..=x].copy_from_slice(&scores[..=x]);
            let out = &mut c.heads[x * d..][hs.clone()];
            for y in 0..=x {
                axpy(scores[y], &c.v[y * d..][hs.clone()], out);
            }
        }
    }
    let attn = linear_rows(&c.heads, d, &p.w_o, Some(&p.b_o), d);
    let mut mid = input.to_vec();
    axpy(s, &attn, &mut mid);

    c.a2 = layer_norm_rows(
        &mid,
        d,
        p.ln2_gain.data(),
        p.ln2_bias.data(),
        config.ln_eps,
        &mut c.xhat2,
        &mut c.rstd2,
    );
    c.pre_act = linear_rows(&c.a2, d, &p.w_fc, Some(&p.b_fc), m);
    c.post_act = c.pre_act.iter().map(|&u| gelu(u)).collect();
    let mlp = linear_rows(&c.post_act, m, &p.w_proj, Some(&p.b_proj), d);
    let mut out = mid;
    axpy(s, &mlp, &mut out);
    out
}

/// Vector-Jacobian product: maps `g_out = dL/d(output)` to `dL/d(input)`.
/// When `grads` is given, parameter gradients are accumulated into it.
pub(crate) fn backward(
    config: &ModelConfig,
    p: &BlockParams,
    c: &BlockCache,
    g_out: &[f64],
    n: usize,
    mut grads: Option<&mut BlockParams>,
) -> Vec<f64> {
    let d = config.d_model;
    let m = config.d_mlp;
    let heads = config.n_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let s = config.residual_scale;

    // MLP branch.
    let g_mlp: Vec<f64> = g_out.iter().map(|g| s * g).collect();
    let g_post = linear_rows_t(&g_mlp, d, &p.w_proj, m);
    let g_pre: Vec<f64> = g_post
        .iter()
        .zip(&c.pre_act)
        .map(|(g, &u)| g * gelu_grad(u))
        .collect();
    let g_a2 = linear_rows_t(&g_pre, m, &p.w_fc, d);
    let mut g_mid = g_out.to_vec();
    let mut g_xhat = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let gain2 = p.ln2_gain.data();
    for x in 0..n {
        let ga = &g_a2[x * d..(x + 1) * d];
        for i in 0..d {
            g_xhat[i] = ga[i] * gain2[i];
        }
        ln_linearized(&c.xhat2[x * d..(x + 1) * d], c.rstd2[x], &g_xhat, &mut tmp);
        axpy(1.0, &tmp, &mut g_mid[x * d..(x + 1) * d]);
    }
    if let Some(gr) = grads.as_deref_mut() {
        for x in 0..n {
            outer_acc(&c.post_act[x * m..(x + 1) * m], &g_mlp[x * d..(x + 1) * d], gr.w_proj.data_mut());
            axpy(1.0, &g_mlp[x * d..(x + 1) * d], gr.b_proj.data_mut());
            outer_acc(&c.a2[x * d..(x + 1) * d], &g_pre[x * m..(x + 1) * m], gr.w_fc.data_mut());
            axpy(1.0, &g_pre[x * m..(x + 1) * m], gr.b_fc.data_mut());
            let ga = &g_a2[x * d..(x + 1) * d];
            let xh = &c.xhat2[x * d..(x + 1) * d];
            for i in 0..d {
                gr.ln2_gain.data_mut()[i] += ga[i] * xh[i];
                gr.ln2_bias.data_mut()[i] += ga[i];
            }
        }
    }

    // Attention branch.
    let g_attn: Vec<f64> = g_mid.iter().map(|g| s * g).collect();
    let g_heads = linear_rows_t(&g_attn, d, &p.w_o, d);
    let mut g_q = vec![0.0; n * d];
    let mut g_k = vec![0.0; n * d];
    let mut g_v = vec![0.0; n * d];
    let mut g_p = vec![0.0; n];
    for h in 0..heads {
        let hs = h * hd..(h + 1) * hd;
        for x in 0..n {
            let prow = &c.probs[(h * n + x) * n..(h * n + x + 1) * n];
            let go = &g_heads[x * d..][hs.clone()];
            let mut weighted = 0.0;
            for y in 0..=x {
                g_p[y] = dot(go, &c.v[y * d..][hs.clone()]);
                weighted += prow[y] * g_p[y];
                axpy(prow[y], go, &mut g_v[y * d..][hs.clone()]);
            }
            for y in 0..=x {
                let g_score = prow[y] * (g_p[y] - weighted) * scale;
                if g_score == 0.0 {
                    continue;
                }
                axpy(g_score, &c.k[y * d..][hs.clone()], &mut g_q[x * d..][hs.clone()]);
                axpy(g_score, &c.q[x * d..][hs.clone()], &mut g_k[y * d..][hs.clone()]);
            }
        }
    }
    let mut g_a1 = linear_rows_t(&g_q, d, &p.w_q, d);
    axpy(1.0, &linear_rows_t(&g_k, d, &p.w_k, d), &mut g_a1);
    axpy(1.0, &linear_rows_t(&g_v, d, &p.w_v, d), &mut g_a1);

    let mut g_in = g_mid;
    let gain1 = p.ln1_gain.data();
    for x in 0..n {
        let ga = &g_a1[x * d..(x + 1) * d];
        for i in 0..d {
            g_xhat[i] = ga[i] * gain1[i];
        }
        ln_linearized(&c.xhat1[x * d..(x + 1) * d], c.rstd1[x], &g_xhat, &mut tmp);
        axpy(1.0, &tmp, &mut g_in[x * d..(x + 1) * d]);
    }
    if let Some(gr) = grads {
        for x in 0..n {
            outer_acc(&c.heads[x * d..(x + 1) * d], &g_attn[x * d..(x + 1) * d], gr.w_o.data_mut());
            axpy(1.0, &g_attn[x * d..(x + 1) * d], gr.b_o.data_mut());
            let a1 = &c.a1[x * d..(x + 1) * d];
            outer_acc(a1, &g_q[x * d..(x + 1) * d], gr.w_q.data_mut());
            outer_acc(a1, &g_k[x * d..(x + 1) * d], gr.w_k.data_mut());
            outer_acc(a1, &g_v[x * d..(x + 1) * d], gr.w_v.data_mut());
            axpy(1.0, &g_q[x * d..(x + 1) * d], gr.b_q.data_mut());
            axpy(1.0, &g_k[x * d..(x + 1) * d], gr.b_k.data_mut());
            axpy(1.0, &g_v[x * d..(x + 1) * d], gr.b_v.data_mut());
            let ga = &g_a1[x * d..(x + 1) * d];
            let xh = &c.xhat1[x * d..(x + 1) * d];
            for i in 0..d {
                gr.ln1_gain.data_mut()[i] += ga[i] * xh[i];
                gr.ln1_bias.data_mut()[i] += ga[i];
            }
        }
    }
    g_in
}

/// Jacobian-vector product: maps an input tangent `[n * d]` to the output tangent.
pub(crate) fn jvp(config: &ModelConfig, p: &BlockParams, c: &BlockCache, t_in: &[f64], n: usize) -> Vec<f64> {
    let d = config.d_model;
    let m = config.d_mlp;
    let heads = config.n_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let s = config.residual_scale;

    let mut tmp = vec![0.0; d];
    let mut t_a1 = vec![0.0; n * d];
    let gain1 = p.ln1_gain.data();
    for x in 0..n {
        let t = &t_in[x * d..(x + 1) * d];
        if t.iter().all(|&v| v == 0.0) {
            continue;
        }
        ln_linearized(&c.xhat1[x * d..(x + 1) * d], c.rstd1[x], t, &mut tmp);
        for i in 0..d {
            t_a1[x * d + i] = gain1[i] * tmp[i];
        }
    }
    let t_q = linear_rows(&t_a1, d, &p.w_q, None, d);
    let t_k = linear_rows(&t_a1, d, &p.w_k, None, d);
    let t_v = linear_rows(&t_a1, d, &p.w_v, None, d);

    let mut t_heads = vec![0.0; n * d];
    let mut t_score = vec![0.0; n];
    for h in 0..heads {
        let hs = h * hd..(h + 1) * hd;
        for x in 0..n {
            let prow = &c.probs[(h * n + x) * n..(h * n + x + 1) * n];
            let qx = &c.q[x * d..][hs.clone()];
            let tqx = &t_q[x * d..][hs.clone()];
            let mut mean = 0.0;
            for y in 0..=x {
                t_score[y] = (dot(tqx, &c.k[y * d..][hs.clone()]) + dot(qx, &t_k[y * d..][hs.clone()])) * scale;
                mean += prow[y] * t_score[y];
            }
            let out = &mut t_heads[x * d..][hs.clone()];
            for y in 0..=x {
                let t_p = prow[y] * (t_score[y] - mean);
                axpy(t_p, &c.v[y * d..][hs.clone()], out);
                axpy(prow[y], &t_v[y * d..][hs.clone()], out);
            }
        }
    }
    let t_attn = linear_rows(&t_heads, d, &p.w_o, None, d);
    let mut t_mid = t_in.to_vec();
    axpy(s, &t_attn, &mut t_mid);

    let mut t_a2 = vec![0.0; n * d];
    let gain2 = p.ln2_gain.data();
    for x in 0..n {
        let t = &t_mid[x * d..(x + 1) * d];
        if t.iter().all(|&v| v == 0.0) {
            continue;
        }
        ln_linearized(&c.xhat2[x * d..(x + 1) * d], c.rstd2[x], t, &mut tmp);
        for i in 0..d {
            t_a2[x * d + i] = gain2[i] * tmp[i];
        }
    }
    let mut t_pre = linear_rows(&t_a2, d, &p.w_fc, None, m);
    for (t, &u) in t_pre.iter_mut().zip(&c.pre_act) {
        *t *= gelu_grad(u);
    }
    let t_mlp = linear_rows(&t_pre, m, &p.w_proj, None, d);
    let mut t_out = t_mid;
    axpy(s, &t_mlp, &mut t_out);
    t_out
}
