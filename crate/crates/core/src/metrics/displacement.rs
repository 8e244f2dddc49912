// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt-displacement analysis.
//!
//! For matched prompts `q_A`, `q_B` the displacement `J = R(q_B) - R(q_A)` at
//! a site is patched into run A. The observable is
//! `y_AB = logit(answer_B) - logit(answer_A)` and the toward fraction is
//!
//! ```text
//! f = dy_A[eps J] / (sign(D) * max(|D|, eps0)),   D = y_AB(q_B) - y_AB(q_A)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::Linearization;
use crate::error::{Error, Result};
use crate::field::{ResidualField, Site};
use crate::intervention::{CleanRun, PatchSource};
use crate::model::{Model, Observable};
use crate::numeric::{dot, norm, Tensor, EPS0};

/// Two matched prompts and their answer and key tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub id: usize,
    pub tokens_a: Vec<usize>,
    pub tokens_b: Vec<usize>,
    pub key_a: usize,
    pub key_b: usize,
    pub answer_a: usize,
    pub answer_b: usize,
}

impl PromptPair {
    /// `y_AB` read at the final position.
    pub fn observable(&self) -> Observable {
        Observable::new(self.answer_b, self.answer_a)
    }
}

/// `prompt_displacement`: `R_B(site) - R_A(site)`.
pub fn prompt_displacement(run_a: &ResidualField, run_b: &ResidualField, site: Site) -> Result<Vec<f64>> {
    if run_a.tokens() != run_b.tokens() || run_a.layers() != run_b.layers() || run_a.width() != run_b.width() {
        return Err(Error::Config(format!(
            "prompt lengths differ: {} vs {} tokens",
            run_a.tokens(),
            run_b.tokens()
        )));
    }
    if site.layer >= run_a.layers() || site.token >= run_a.tokens() {
        return Err(Error::OutOfRange(format!("site {site} outside the residual grid")));
    }
    Ok(run_b.site(site).iter().zip(run_a.site(site)).map(|(b, a)| b - a).collect())
}

/// `toward_fraction` with a sign-preserving floored denominator.
pub fn toward_fraction(dy_a: f64, delta: f64, eps0: f64) -> f64 {
    let sign = if delta < 0.0 { -1.0 } else { 1.0 };
    dy_a / (sign * delta.abs().max(eps0))
}

/// `direction_angles` in degrees; `None` when either vector is zero.
pub fn direction_angles(j: &[f64], references: &[Vec<f64>]) -> Vec<Option<f64>> {
    let nj = norm(j);
    references
        .iter()
        .map(|r| {
            let nr = norm(r);
            (nj > 0.0 && nr > 0.0).then(|| (dot(j, r) / (nj * nr)).clamp(-1.0, 1.0).acos().to_degrees())
        })
        .collect()
}

/// `answer_rank`: `1 + #{strictly larger logits} + #{equal logits at lower token ids}`.
pub fn answer_rank(logits: &Tensor, token: usize, position: usize) -> Result<usize> {
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    if token >= v || position >= n {
        return Err(Error::OutOfRange(format!("token {token} at position {position} outside [{n}, {v}] logits")));
    }
    let row = logits.row(position);
    let t = row[token];
    Ok(1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l > t || (l == t && i < token))
        .count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub pair_id: usize,
    pub site: Site,
    pub displacement: Vec<f64>,
    pub displacement_norm: f64,
    /// Clean shift `y_AB(q_B) - y_AB(q_A)`.
    pub delta: f64,
    pub epsilons: Vec<f64>,
    pub toward: Vec<f64>,
    /// Angles to the answer-embedding difference, the key-embedding
    /// difference and the local gradient of `y_AB` on run A.
    pub angles: Vec<Option<f64>>,
    /// Rank of answer B in clean A, patched A per amplitude, and clean B.
    pub rank_clean_a: usize,
    pub rank_patched_a: Vec<usize>,
    pub rank_clean_b: usize,
}

/// Full displacement analysis of one pair at one site.
pub fn displacement_report(model: &Model, pair: &PromptPair, site: Site, epsilons: &[f64]) -> Result<DisplacementReport> {
    let a = CleanRun::new(model, &pair.tokens_a)?;
    let b = CleanRun::new(model, &pair.tokens_b)?;
    let lin = Linearization::new(model, &pair.tokens_a)?;
    displacement_report_with(model, pair, site, epsilons, &a, &b, &lin)
}

fn displacement_report_with(
    model: &Model,
    pair: &PromptPair,
    site: Site,
    epsilons: &[f64],
    a: &CleanRun,
    b: &CleanRun,
    lin: &Linearization,
) -> Result<DisplacementReport> {
    if pair.answer_a == pair.answer_b {
        return Err(Error::Config(format!("pair {} has identical answers", pair.id)));
    }
    let obs = pair.observable();
    let j = prompt_displacement(a.residuals(), b.residuals(), site)?;
    let delta = b.y(&obs)? - a.y(&obs)?;
    let last = pair.tokens_a.len() - 1;
    let mut toward = Vec::with_capacity(epsilons.len());
    let mut ranks = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let patched = a.patch(&[PatchSource::new(site, j.clone(), eps)])?;
        let dy = model.observe(&patched.residuals, &obs)? - a.y(&obs)?;
        toward.push(toward_fraction(dy, delta, EPS0));
        ranks.push(answer_rank(&patched.logits, pair.answer_b, last)?);
    }
    let emb = &model.params.token_embedding;
    let diff = |x: usize, y: usize| -> Vec<f64> { emb.row(y).iter().zip(emb.row(x)).map(|(p, q)| p - q).collect() };
    let grad = lin.sensitivity(&obs)?.site(site).to_vec();
    let refs = vec![diff(pair.answer_a, pair.answer_b), diff(pair.key_a, pair.key_b), grad];
    Ok(DisplacementReport {
        pair_id: pair.id,
        site,
        displacement_norm: norm(&j),
        angles: direction_angles(&j, &refs),
        displacement: j,
        delta,
        epsilons: epsilons.to_vec(),
        toward,
        rank_clean_a: answer_rank(&a.output().logits, pair.answer_b, last)?,
        rank_patched_a: ranks,
        rank_clean_b: answer_rank(&b.output().logits, pair.answer_b, last)?,
    })
}

/// Reports at `(l, token)` for every layer `l`, sharing the clean runs.
pub fn layer_sweep(model: &Model, pair: &PromptPair, token: usize, epsilons: &[f64]) -> Result<Vec<DisplacementReport>> {
    let a = CleanRun::new(model, &pair.tokens_a)?;
    let b = CleanRun::new(model, &pair.tokens_b)?;
    let lin = Linearization::new(model, &pair.tokens_a)?;
    (0..=model.n_layers())
        .map(|l| displacement_report_with(model, pair, Site::new(l, token), epsilons, &a, &b, &lin))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numeric::RngStream;

    #[test]
    fn angles() {
        let mut r = RngStream::new(1);
        let j = r.unit_vector(16);
        let neg: Vec<f64> = j.iter().map(|v| -v).collect();
        let mut o = r.unit_vector(16);
        let c = dot(&o, &j);
        o.iter_mut().zip(&j).for_each(|(x, y)| *x -= c * y);
        let a = direction_angles(&j, &[j.clone(), neg, o, vec![0.0; 16]]);
        assert!(a[0].unwrap().abs() < 1e-6);
        assert!((a[1].unwrap() - 180.0).abs() < 1e-6);
        assert!((a[2].unwrap() - 90.0).abs() < 1e-6);
        assert!(a[3].is_none());
    }

    #[test]
    fn ranks() {
        let l = Tensor::from_vec(&[1, 4], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(answer_rank(&l, 1, 0).unwrap(), 1);
        assert_eq!(answer_rank(&l, 0, 0).unwrap(), 4);
        let u = Tensor::filled(&[2, 5], 0.7);
        for t in 0..5 {
            assert_eq!(answer_rank(&u, t, 1).unwrap(), t + 1);
        }
        assert!(answer_rank(&u, 5, 0).is_err());
    }

    #[test]
    fn toward_floor_keeps_sign() {
        assert_eq!(toward_fraction(0.0, 3.0, EPS0), 0.0);
        assert_eq!(toward_fraction(-2.0, -4.0, EPS0), 0.5);
        assert_eq!(toward_fraction(1e-8, 0.0, EPS0), 1.0);
        assert_eq!(toward_fraction(1e-8, -0.0, EPS0), 1.0);
    }

    #[test]
    fn final_site_replacement() {
        let m = Model::init(ModelConfig::small(0)).unwrap();
        let a = vec![3, 9, 12, 40, 7, 2];
        let mut b = a.clone();
        b[4] = 8;
        let pair = PromptPair {
            id: 0,
            tokens_a: a.clone(),
            tokens_b: b.clone(),
            key_a: 7,
            key_b: 8,
            answer_a: 20,
            answer_b: 21,
        };
        let r = displacement_report(&m, &pair, Site::new(4, 5), &[0.0, 1.0]).unwrap();
        assert_eq!(r.toward[0], 0.0);
        assert!((r.toward[1] - 1.0).abs() < 1e-6);
        assert_eq!(r.rank_patched_a[1], r.rank_clean_b);
        let ra = m.forward(&a).unwrap().residuals;
        let rb = m.forward(&b).unwrap().residuals;
        let s = Site::new(2, 5);
        let ab = prompt_displacement(&ra, &rb, s).unwrap();
        let ba = prompt_displacement(&rb, &ra, s).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| x == &-y));
        assert!(prompt_displacement(&ra, &ra, s).unwrap().iter().all(|&v| v == 0.0));
        let short = m.forward(&a[..5]).unwrap().residuals;
        assert!(prompt_displacement(&ra, &short, s).is_err());
        let sweep = layer_sweep(&m, &pair, 5, &[1.0]).unwrap();
        assert_eq!(sweep.len(), 5);
    }
}
