// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact first-order derivatives of the residual dynamics.
//!
//! Reverse mode (VJP) carries a cotangent from a readout back through the
//! blocks; forward mode (JVP) carries a tangent from a seed site up through
//! them. Both are evaluated along one clean trajectory held by
//! [`Linearization`], so many probes share a single forward pass. The full
//! linearized operator is never stored; only its action is exposed.

use crate::error::{Error, Result};
use crate::field::{Field, SensitivityField, Site, TangentField};
use crate::intervention::{apply_patches, PatchSource};
use crate::model::{block, Model, Observable, ReadoutMode, Trace};
use crate::numeric::{dot, ln_stats};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A model linearized around the clean run of one prompt.
pub struct Linearization<'a> {
    model: &'a Model,
    tokens: Vec<usize>,
    trace: Trace,
}

impl<'a> Linearization<'a> {
    pub fn new(model: &'a Model, tokens: &[usize]) -> Result<Self> {
        let trace = model.trace(tokens)?;
        Ok(Self {
            model,
            tokens: tokens.to_vec(),
            trace,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn residuals(&self) -> &crate::field::ResidualField {
        &self.trace.residuals
    }

    fn n(&self) -> usize {
        self.trace.tokens
    }

    fn d(&self) -> usize {
        self.model.width()
    }

    /// Gradient of the observable with respect to the final residual row at the readout.
    fn readout_gradient(&self, obs: &Observable) -> Result<Vec<f64>> {
        let n = self.n();
        obs.validate(self.model.config.vocab_size, n)?;
        let d = self.d();
        let v = self.model.config.vocab_size;
        let wu = self.model.params.unembedding.data();
        let w: Vec<f64> = (0..d).map(|i| wu[i * v + obs.target] - wu[i * v + obs.reference]).collect();
        match obs.readout {
            ReadoutMode::Linear => Ok(w),
            ReadoutMode::LayerNorm => {
                let r = self.trace.residuals.at(self.model.n_layers(), obs.readout_position(n));
                let st = ln_stats(r, self.model.config.ln_eps);
                let xhat: Vec<f64> = r.iter().map(|&x| (x - st.mean) * st.rstd).collect();
                let g: Vec<f64> = w
                    .iter()
                    .zip(self.model.params.final_ln_gain.data())
                    .map(|(a, b)| a * b)
                    .collect();
                let mean_g = g.iter().sum::<f64>() / d as f64;
                let mean_xg = dot(&xhat, &g) / d as f64;
                Ok((0..d).map(|i| st.rstd * (g[i] - mean_g - xhat[i] * mean_xg)).collect())
            }
        }
    }

    /// Pulls a cotangent on layer `layer` (`[n * d]`) back to layers `0..=layer`.
    pub fn vjp_from_layer(&self, layer: usize, seed: &[f64]) -> Result<Field> {
        let (n, d) = (self.n(), self.d());
        if layer > self.model.n_layers() || seed.len() != n * d {
            return Err(Error::OutOfRange(format!("invalid VJP seed at layer {layer}")));
        }
        let mut out = Field::zeros(layer + 1, n, d);
        out.layer_mut(layer).copy_from_slice(seed);
        let mut g = seed.to_vec();
        for l in (1..=layer).rev() {
            g = block::backward(
                &self.model.config,
                &self.model.params.blocks[l - 1],
                &self.trace.blocks[l - 1],
                &g,
                n,
                None,
            );
            out.layer_mut(l - 1).copy_from_slice(&g);
        }
        if let Some(site) = out.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient at site {site}")));
        }
        Ok(out)
    }

    /// Pushes a tangent on layer `layer` (`[n * d]`) forward to every later layer.
    /// Layers below `layer` are zero.
    pub fn jvp_from_layer(&self, layer: usize, tangent: &[f64]) -> Result<Field> {
        let (n, d) = (self.n(), self.d());
        if layer > self.model.n_layers() || tangent.len() != n * d {
            return Err(Error::OutOfRange(format!("invalid JVP seed at layer {layer}")));
        }
        let mut out = Field::zeros(self.model.n_layers() + 1, n, d);
        out.layer_mut(layer).copy_from_slice(tangent);
        let mut t = tangent.to_vec();
        for l in layer + 1..=self.model.n_layers() {
            t = block::jvp(
                &self.model.config,
                &self.model.params.blocks[l - 1],
                &self.trace.blocks[l - 1],
                &t,
                n,
            );
            out.layer_mut(l).copy_from_slice(&t);
        }
        if let Some(site) = out.first_non_finite() {
            return Err(Error::NonFinite(format!("tangent at site {site}")));
        }
        Ok(out)
    }

    /// `a(l, x) = dy/dR_l(x)` at every site from one backward pass.
    pub fn sensitivity(&self, obs: &Observable) -> Result<SensitivityField> {
        let (n, d) = (self.n(), self.d());
        let g = self.readout_gradient(obs)?;
        let mut seed = vec![0.0; n * d];
        let pos = obs.readout_position(n);
        seed[pos * d..(pos + 1) * d].copy_from_slice(&g);
        Ok(SensitivityField(self.vjp_from_layer(self.model.n_layers(), &seed)?))
    }

    /// Tangent field seeded with `direction` at `site`.
    pub fn jvp(&self, site: Site, direction: &[f64]) -> Result<TangentField> {
        let (n, d) = (self.n(), self.d());
        self.model.check_site(site, n)?;
        if direction.len() != d {
            return Err(Error::Config(format!("direction has length {}, expected {d}", direction.len())));
        }
        let mut seed = vec![0.0; n * d];
        seed[site.token * d..(site.token + 1) * d].copy_from_slice(direction);
        Ok(TangentField(self.jvp_from_layer(site.layer, &seed)?))
    }

    /// Gradient of the scalar `R_l(x, i)` with respect to layers `0..=l`:
    /// row `(l, x, i)` of the empirical Green operator.
    pub fn vjp_component(&self, site: Site, component: usize) -> Result<Field> {
        let (n, d) = (self.n(), self.d());
        self.model.check_site(site, n)?;
        if component >= d {
            return Err(Error::OutOfRange(format!("component {component} outside width {d}")));
        }
        let mut seed = vec![0.0; n * d];
        seed[site.token * d + component] = 1.0;
        self.vjp_from_layer(site.layer, &seed)
    }
}

/// `sensitivity_field`: exact reverse-mode gradient of `y` on the clean run.
pub fn sensitivity_field(model: &Model, tokens: &[usize], obs: &Observable) -> Result<SensitivityField> {
    Linearization::new(model, tokens)?.sensitivity(obs)
}

/// `jvp_residual`: first-order response of all residual slices to `direction` at `site`.
pub fn jvp_residual(model: &Model, tokens: &[usize], site: Site, direction: &[f64]) -> Result<TangentField> {
    Linearization::new(model, tokens)?.jvp(site, direction)
}

/// `vjp_component`: gradient of `R_l(x, i)` with respect to all earlier slices.
pub fn vjp_component(model: &Model, tokens: &[usize], site: Site, component: usize) -> Result<Field> {
    Linearization::new(model, tokens)?.vjp_component(site, component)
}

/// `fd_patch_derivative`: `(y(+h) - y(-h)) / 2h` from two true patched forwards.
pub fn fd_patch_derivative(
    model: &Model,
    tokens: &[usize],
    site: Site,
    direction: &[f64],
    obs: &Observable,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let y = |eps: f64| -> Result<f64> {
        let patch = PatchSource::new(site, direction.to_vec(), eps);
        let out = apply_patches(model, tokens, std::slice::from_ref(&patch))?;
        model.observe(&out.residuals, obs)
    };
    let deriv = (y(h)? - y(-h)?) / (2.0 * h);
    if !deriv.is_finite() {
        return Err(Error::NonFinite("finite-difference derivative".into()));
    }
    Ok(deriv)
}

/// Fourth-order central difference
/// `(-y(2h) + 8y(h) - 8y(-h) + y(-2h)) / 12h`, for checks that need the
/// truncation error far below the two-point stencil's.
pub fn fd_patch_derivative_4(
    model: &Model,
    tokens: &[usize],
    site: Site,
    direction: &[f64],
    obs: &Observable,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let y = |eps: f64| -> Result<f64> {
        let patch = PatchSource::new(site, direction.to_vec(), eps);
        let out = apply_patches(model, tokens, std::slice::from_ref(&patch))?;
        model.observe(&out.residuals, obs)
    };
    let deriv = (-y(2.0 * h)? + 8.0 * y(h)? - 8.0 * y(-h)? + y(-2.0 * h)?) / (12.0 * h);
    if !deriv.is_finite() {
        return Err(Error::NonFinite("finite-difference derivative".into()));
    }
    Ok(deriv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numeric::RngStream;

    fn setup() -> (Model, Vec<usize>) {
        let m = Model::init(ModelConfig::small(0)).unwrap();
        let mut r = RngStream::new(77);
        let t = (0..8).map(|_| r.below(64)).collect();
        (m, t)
    }

    #[test]
    fn equal_tokens_give_zero_sensitivity() {
        let (m, t) = setup();
        let a = sensitivity_field(&m, &t, &Observable::new(3, 3)).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sensitivity_vanishes_after_readout() {
        let (m, t) = setup();
        let a = sensitivity_field(&m, &t, &Observable::new(1, 2).at(4)).unwrap();
        for l in 0..=m.n_layers() {
            for x in 5..8 {
                assert!(a.at(l, x).iter().all(|&v| v == 0.0));
            }
        }
        assert!(a.at(0, 0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn jvp_linearity_and_seed() {
        let (m, t) = setup();
        let lin = Linearization::new(&m, &t).unwrap();
        let mut r = RngStream::new(5);
        let dir = r.unit_vector(32);
        let site = Site::new(1, 3);
        let zero = lin.jvp(site, &[0.0; 32]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let a = lin.jvp(site, &dir).unwrap();
        assert_eq!(a.site(site), &dir[..]);
        let scaled: Vec<f64> = dir.iter().map(|v| 2.5 * v).collect();
        let b = lin.jvp(site, &scaled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
        // Causal cone: zero before the seed layer and before the seed token.
        for l in 0..=m.n_layers() {
            for x in 0..8 {
                if l < 1 || x < 3 {
                    assert!(a.at(l, x).iter().all(|&v| v == 0.0), "({l}, {x})");
                }
            }
        }
    }

    #[test]
    fn vjp_component_identity_and_causality() {
        let (m, t) = setup();
        let lin = Linearization::new(&m, &t).unwrap();
        let g = lin.vjp_component(Site::new(3, 4), 7).unwrap();
        assert_eq!(g.layers(), 4);
        let row = g.at(3, 4);
        for (i, &v) in row.iter().enumerate() {
            assert_eq!(v, if i == 7 { 1.0 } else { 0.0 });
        }
        for l in 0..=3 {
            for x in 5..8 {
                assert!(g.at(l, x).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn transpose_identity() {
        let (m, t) = setup();
        let lin = Linearization::new(&m, &t).unwrap();
        let mut r = RngStream::new(19);
        for _ in 0..50 {
            let src = Site::new(r.below(5), r.below(8));
            let tgt = Site::new(src.layer + r.below(5 - src.layer), src.token + r.below(8 - src.token));
            let i = r.below(32);
            let j = r.unit_vector(32);
            let fwd = lin.jvp(src, &j).unwrap();
            let bwd = lin.vjp_component(tgt, i).unwrap();
            let lhs = fwd.site(tgt)[i];
            let rhs = dot(bwd.site(src), &j);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn jvp_matches_finite_patch_at_first_order() {
        let (m, t) = setup();
        let lin = Linearization::new(&m, &t).unwrap();
        let mut r = RngStream::new(23);
        let dir = r.unit_vector(32);
        let site = Site::new(1, 2);
        let tangent = lin.jvp(site, &dir).unwrap();
        let clean = m.forward(&t).unwrap();
        let mut errs = Vec::new();
        for eps in [1e-3, 5e-4, 2.5e-4] {
            let patched = apply_patches(&m, &t, &[PatchSource::new(site, dir.clone(), eps)]).unwrap();
            let mut diff = patched.residuals.diff(&clean.residuals);
            diff.scale(1.0 / eps);
            errs.push(diff.diff(&tangent).norm());
        }
        // O(eps): halving eps roughly halves the error.
        for w in errs.windows(2) {
            let ratio = w[1] / w[0];
            assert!(ratio > 0.4 && ratio < 0.6, "ratio {ratio}, errors {errs:?}");
        }
    }

    #[test]
    fn fd_derivative_basics() {
        let (m, t) = setup();
        let obs = Observable::new(5, 9);
        let site = Site::new(2, 3);
        assert_eq!(fd_patch_derivative(&m, &t, site, &[0.0; 32], &obs, 1e-5).unwrap(), 0.0);
        assert!(fd_patch_derivative(&m, &t, site, &[0.0; 32], &obs, 0.0).is_err());
        let mut r = RngStream::new(4);
        let dir = r.unit_vector(32);
        let lin_obs = obs.linear();
        let top = Site::new(4, 7);
        let a = fd_patch_derivative(&m, &t, top, &dir, &lin_obs, 1e-3).unwrap();
        let b = fd_patch_derivative(&m, &t, top, &dir, &lin_obs, 1e-5).unwrap();
        assert!((a - b).abs() < 1e-9);
        let sens = sensitivity_field(&m, &t, &obs).unwrap();
        let fd = fd_patch_derivative(&m, &t, site, &dir, &obs, 1e-5).unwrap();
        let an = dot(sens.site(site), &dir);
        assert!((fd - an).abs() / an.abs() < 1e-6, "{fd} vs {an}");
    }
}
