// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream patching and the two measured field experiments.
//!
//! A patch adds `eps * P(J)` to the block output at one or more sites, then
//! recomputes everything downstream. [`relative_response_map`] bins the
//! resulting response norms by layer and token offset; [`composition_test`]
//! checks whether the response at a middle layer, re-propagated from there,
//! reproduces the direct downstream response.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Linearization;
use crate::error::{Error, Result};
use crate::field::{ResidualField, ResponseField, Site};
use crate::model::{ForwardOutput, Injections, Model, Observable};
use crate::numeric::{dot, norm, EPS0};

/// Which layers a patch touches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSupport {
    /// Only the site's own layer.
    Single,
    /// Every block output from `first` to `last` inclusive.
    Interval { first: usize, last: usize },
}

/// Projection applied to the direction before injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Identity,
    /// Keeps components whose flag is set.
    Mask(Vec<bool>),
    /// Orthogonal projector onto the span of orthonormal basis rows.
    Subspace(Vec<Vec<f64>>),
}

impl Projection {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Projection::Identity => v.to_vec(),
            Projection::Mask(m) => v.iter().zip(m).map(|(&x, &keep)| if keep { x } else { 0.0 }).collect(),
            Projection::Subspace(basis) => {
                let mut out = vec![0.0; v.len()];
                for b in basis {
                    let c = dot(b, v);
                    for (o, &bi) in out.iter_mut().zip(b) {
                        *o += c * bi;
                    }
                }
                out
            }
        }
    }

    fn validate(&self, width: usize) -> Result<()> {
        match self {
            Projection::Identity => Ok(()),
            Projection::Mask(m) if m.len() == width => Ok(()),
            Projection::Mask(m) => Err(Error::Config(format!("mask has length {}, expected {width}", m.len()))),
            Projection::Subspace(basis) => {
                for (i, a) in basis.iter().enumerate() {
                    if a.len() != width {
                        return Err(Error::Config(format!("basis vector {i} has wrong length")));
                    }
                    for (j, b) in basis.iter().enumerate().take(i + 1) {
                        let want = if i == j { 1.0 } else { 0.0 };
                        if (dot(a, b) - want).abs() > 1e-8 {
                            return Err(Error::Config("subspace basis is not orthonormal".into()));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// A localized source `eps * P(J)` at `site`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSource {
    pub site: Site,
    pub direction: Vec<f64>,
    pub amplitude: f64,
    pub support: DepthSupport,
    pub projection: Projection,
}

impl PatchSource {
    pub fn new(site: Site, direction: Vec<f64>, amplitude: f64) -> Self {
        Self {
            site,
            direction,
            amplitude,
            support: DepthSupport::Single,
            projection: Projection::Identity,
        }
    }

    /// Extends the source over layers `site.layer..=last`.
    pub fn through(mut self, last: usize) -> Self {
        self.support = DepthSupport::Interval {
            first: self.site.layer,
            last,
        };
        self
    }

    pub fn projected(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self {
            amplitude,
            ..self.clone()
        }
    }

    /// `||J||` before projection.
    pub fn direction_norm(&self) -> f64 {
        norm(&self.direction)
    }

    /// The injected vector `eps * P(J)`.
    pub fn delta(&self) -> Vec<f64> {
        self.projection.apply(&self.direction).into_iter().map(|v| v * self.amplitude).collect()
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        match self.support {
            DepthSupport::Single => self.site.layer..=self.site.layer,
            DepthSupport::Interval { first, last } => first..=last,
        }
    }

    pub fn validate(&self, model: &Model, n_tokens: usize) -> Result<()> {
        model.check_site(self.site, n_tokens)?;
        if self.direction.len() != model.width() {
            return Err(Error::Config(format!(
                "patch direction has length {}, expected {}",
                self.direction.len(),
                model.width()
            )));
        }
        if !self.amplitude.is_finite() || self.direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch source".into()));
        }
        if let DepthSupport::Interval { first, last } = self.support {
            if first != self.site.layer || first > last || last > model.n_layers() {
                return Err(Error::Config(format!("invalid depth interval [{first}, {last}]")));
            }
        }
        self.projection.validate(model.width())
    }

    fn injections(&self) -> Injections {
        let mut inj = Injections::new();
        let delta = self.delta();
        for layer in self.layers() {
            inj.add(Site::new(layer, self.site.token), delta.clone());
        }
        inj
    }
}

/// Amplitude equal to `fraction * ||R_l(x)||` on the clean run.
pub fn relative_amplitude(residuals: &ResidualField, site: Site, fraction: f64) -> f64 {
    fraction * norm(residuals.site(site))
}

/// `apply_patch`
pub fn apply_patch(model: &Model, tokens: &[usize], patch: &PatchSource) -> Result<ForwardOutput> {
    apply_patches(model, tokens, std::slice::from_ref(patch))
}

/// Several sources applied together in one forward pass.
pub fn apply_patches(model: &Model, tokens: &[usize], patches: &[PatchSource]) -> Result<ForwardOutput> {
    model.check_tokens(tokens)?;
    let mut inj = Injections::new();
    for p in patches {
        p.validate(model, tokens.len())?;
        for e in p.injections().entries() {
            inj.add(e.0, e.1.clone());
        }
    }
    model.run(tokens, &inj)
}

/// `measure_dy`: `y(patched) - y(clean)`.
pub fn measure_dy(model: &Model, tokens: &[usize], patch: &PatchSource, obs: &Observable) -> Result<f64> {
    CleanRun::new(model, tokens)?.measure_dy(patch, obs)
}

/// `response_field`: `R_patched - R_clean` everywhere.
pub fn response_field(model: &Model, tokens: &[usize], patch: &PatchSource) -> Result<ResponseField> {
    CleanRun::new(model, tokens)?.response_field(patch)
}

/// A clean forward pass reused as the baseline for many patches.
///
/// Patched runs resume from the clean stream at the lowest patched layer,
/// which reproduces a full patched forward bit for bit.
pub struct CleanRun<'a> {
    model: &'a Model,
    tokens: Vec<usize>,
    output: ForwardOutput,
}

impl<'a> CleanRun<'a> {
    pub fn new(model: &'a Model, tokens: &[usize]) -> Result<Self> {
        let output = model.forward(tokens)?;
        Ok(Self {
            model,
            tokens: tokens.to_vec(),
            output,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn output(&self) -> &ForwardOutput {
        &self.output
    }

    pub fn residuals(&self) -> &ResidualField {
        &self.output.residuals
    }

    pub fn patch(&self, patches: &[PatchSource]) -> Result<ForwardOutput> {
        let mut inj = Injections::new();
        for p in patches {
            p.validate(self.model, self.tokens.len())?;
            for e in p.injections().entries() {
                inj.add(e.0, e.1.clone());
            }
        }
        self.inject(&inj)
    }

    /// Runs arbitrary injections on top of the clean stream.
    pub fn inject(&self, inj: &Injections) -> Result<ForwardOutput> {
        match inj.min_layer() {
            None => Ok(self.output.clone()),
            Some(start) => self.model.resume_from(&self.output.residuals, start, inj),
        }
    }

    pub fn y(&self, obs: &Observable) -> Result<f64> {
        self.model.observe(&self.output.residuals, obs)
    }

    pub fn measure_dy(&self, patch: &PatchSource, obs: &Observable) -> Result<f64> {
        self.measure_dy_many(std::slice::from_ref(patch), obs)
    }

    pub fn measure_dy_many(&self, patches: &[PatchSource], obs: &Observable) -> Result<f64> {
        let patched = self.patch(patches)?;
        Ok(self.model.observe(&patched.residuals, obs)? - self.y(obs)?)
    }

    pub fn response_field(&self, patch: &PatchSource) -> Result<ResponseField> {
        if patch.support != DepthSupport::Single {
            return Err(Error::Config("response fields are defined for single-layer patches".into()));
        }
        let patched = self.patch(std::slice::from_ref(patch))?;
        Ok(ResponseField(patched.residuals.diff(&self.output.residuals)))
    }
}

/// Mean response norm binned by `(layer offset, token offset)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeResponseMap {
    pub amplitude: f64,
    /// `(d_layer, d_token) -> (sum of ||dR||, count)`.
    bins: BTreeMap<(usize, usize), (f64, usize)>,
}

impl RelativeResponseMap {
    fn new(amplitude: f64) -> Self {
        Self {
            amplitude,
            bins: BTreeMap::new(),
        }
    }

    fn add(&mut self, key: (usize, usize), value: f64) {
        let e = self.bins.entry(key).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    fn merge(mut self, other: Self) -> Self {
        for (k, (s, c)) in other.bins {
            let e = self.bins.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += c;
        }
        self
    }

    pub fn mean(&self, d_layer: usize, d_token: usize) -> Option<f64> {
        self.bins.get(&(d_layer, d_token)).map(|&(s, c)| s / c as f64)
    }

    pub fn count(&self, d_layer: usize, d_token: usize) -> usize {
        self.bins.get(&(d_layer, d_token)).map_or(0, |b| b.1)
    }

    /// `(d_layer, d_token, mean, count)` rows in ascending bin order.
    pub fn rows(&self) -> Vec<(usize, usize, f64, usize)> {
        self.bins.iter().map(|(&(l, x), &(s, c))| (l, x, s / c as f64, c)).collect()
    }

    pub fn max_offsets(&self) -> (usize, usize) {
        self.bins.keys().fold((0, 0), |acc, &(l, x)| (acc.0.max(l), acc.1.max(x)))
    }

    /// Mean response per token offset, pooled over layer offsets `>= 1`.
    pub fn token_marginal(&self) -> Vec<f64> {
        let (_, max_dx) = self.max_offsets();
        let mut sum = vec![0.0; max_dx + 1];
        let mut cnt = vec![0usize; max_dx + 1];
        for (&(l, x), &(s, c)) in &self.bins {
            if l >= 1 {
                sum[x] += s;
                cnt[x] += c;
            }
        }
        sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
    }
}

/// `relative_response_map`: one patch per source site with a shared unit
/// direction; responses are remapped to offsets from the source and averaged.
pub fn relative_response_map(
    model: &Model,
    tokens: &[usize],
    sites: &[Site],
    direction: &[f64],
    amplitude: f64,
) -> Result<RelativeResponseMap> {
    if sites.is_empty() {
        return Err(Error::Config("relative response map needs at least one source site".into()));
    }
    if (norm(direction) - 1.0).abs() > 1e-9 {
        return Err(Error::Config("shared direction must have unit norm".into()));
    }
    let clean = CleanRun::new(model, tokens)?;
    let partial: Vec<RelativeResponseMap> = sites
        .par_iter()
        .map(|&site| -> Result<RelativeResponseMap> {
            let patch = PatchSource::new(site, direction.to_vec(), amplitude);
            let dr = clean.response_field(&patch)?;
            let mut map = RelativeResponseMap::new(amplitude);
            for l in site.layer..dr.layers() {
                for x in site.token..dr.tokens() {
                    map.add((l - site.layer, x - site.token), norm(dr.at(l, x)));
                }
            }
            Ok(map)
        })
        .collect::<Result<_>>()?;
    // Merge in site order so the floating-point sums are reproducible.
    Ok(partial.into_iter().fold(RelativeResponseMap::new(amplitude), RelativeResponseMap::merge))
}

/// How the hand-off field at the middle layer is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// The measured response at the middle layer.
    Measured,
    /// The first-order tangent at the middle layer.
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub site: Site,
    pub mid_layer: usize,
    pub mode: CompositionMode,
    pub epsilons: Vec<f64>,
    pub eta_comp: Vec<f64>,
}

/// `composition_test`: compares the direct response above `mid_layer` with
/// the response obtained by re-injecting a hand-off field at `mid_layer` on
/// the clean run.
pub fn composition_test(
    model: &Model,
    tokens: &[usize],
    site: Site,
    direction: &[f64],
    mid_layer: usize,
    epsilons: &[f64],
    mode: CompositionMode,
) -> Result<CompositionReport> {
    if !(site.layer < mid_layer && mid_layer < model.n_layers()) {
        return Err(Error::Config(format!(
            "composition needs source layer < middle layer < {}, got {} and {mid_layer}",
            model.n_layers(),
            site.layer
        )));
    }
    let clean = CleanRun::new(model, tokens)?;
    let tangent = match mode {
        CompositionMode::Linearized => Some(Linearization::new(model, tokens)?.jvp(site, direction)?),
        CompositionMode::Measured => None,
    };
    let d = model.width();
    let mut eta = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let patch = PatchSource::new(site, direction.to_vec(), eps);
        let direct = clean.response_field(&patch)?;
        let handoff: Vec<f64> = match &tangent {
            None => direct.layer(mid_layer).to_vec(),
            Some(t) => t.layer(mid_layer).iter().map(|v| v * eps).collect(),
        };
        let mut inj = Injections::new();
        inj.add_layer(mid_layer, &handoff, d);
        let reprop = clean.inject(&inj)?.residuals.diff(clean.residuals());
        let (mut num, mut den) = (0.0, 0.0);
        for l in mid_layer + 1..=model.n_layers() {
            for (a, b) in direct.layer(l).iter().zip(reprop.layer(l)) {
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
        eta.push(num.sqrt() / (den.sqrt() + EPS0));
    }
    Ok(CompositionReport {
        site,
        mid_layer,
        mode,
        epsilons: epsilons.to_vec(),
        eta_comp: eta,
    })
}
