// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-scale response transfer.
//!
//! Every site gets a fingerprint: how strongly it drives a fixed set of
//! probe readouts (outgoing) and how strongly it responds to the same probes
//! used as sources (incoming). Probes are unit directions at anchor sites
//! placed by normalized depth `s = l / L`, so two models of different depth
//! share them. An intertwiner `P` then expresses each site of one model as a
//! nonnegative combination of depth-nearby sites of the other, and the
//! discrete transfer map sends each source site to its heaviest partner.
//!
//! The profile entries are `||G_{b<-a}^T u||` (outgoing, one reverse probe
//! per anchor direction covers every site) and `||G_{a<-b} u||` (incoming,
//! one forward probe per anchor direction).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Linearization;
use crate::error::{Error, Result};
use crate::field::Site;
use crate::model::{Model, ModelConfig, Parameters};
use crate::numeric::{norm, RngStream};

/// Default anchor depths, as fractions of the model depth.
pub const DEFAULT_ANCHOR_DEPTHS: [f64; 8] = [0.0, 0.5, 0.25, 0.75, 1.0, 0.25, 0.75, 1.0];
pub const DEFAULT_DIRECTIONS_PER_ANCHOR: usize = 4;
/// Columns of `P` whose largest weight falls below this are left unmapped.
pub const UNMAPPED_BELOW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    /// Normalized depth in `[0, 1]`.
    pub depth: f64,
    pub token: usize,
}

impl Anchor {
    pub fn layer(&self, n_layers: usize) -> usize {
        (self.depth * n_layers as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub id: usize,
    pub anchor: Anchor,
    pub direction: Vec<f64>,
}

/// Probes shared by every model being compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    /// `per_anchor` random unit directions at each anchor.
    pub fn new(anchors: &[Anchor], per_anchor: usize, width: usize, rng: &mut RngStream) -> Result<Self> {
        if anchors.is_empty() || per_anchor == 0 {
            return Err(Error::Config("probe set needs anchors and directions".into()));
        }
        if let Some(a) = anchors.iter().find(|a| !(0.0..=1.0).contains(&a.depth)) {
            return Err(Error::Config(format!("anchor depth {} outside [0, 1]", a.depth)));
        }
        let mut probes = Vec::with_capacity(anchors.len() * per_anchor);
        for &anchor in anchors {
            for _ in 0..per_anchor {
                probes.push(Probe {
                    id: probes.len(),
                    anchor,
                    direction: rng.unit_vector(width),
                });
            }
        }
        Ok(Self { probes })
    }

    /// The default layout: [`DEFAULT_ANCHOR_DEPTHS`] at evenly spaced tokens
    /// from the first to the last.
    pub fn spread(n_tokens: usize, width: usize, rng: &mut RngStream) -> Result<Self> {
        let k = DEFAULT_ANCHOR_DEPTHS.len();
        let anchors: Vec<Anchor> = DEFAULT_ANCHOR_DEPTHS
            .iter()
            .enumerate()
            .map(|(i, &depth)| Anchor {
                depth,
                token: ((i * n_tokens.saturating_sub(1)) as f64 / (k - 1) as f64).round() as usize,
            })
            .collect();
        Self::new(&anchors, DEFAULT_DIRECTIONS_PER_ANCHOR, width, rng)
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub site: Site,
    /// Normalized depth of the site in its own model.
    pub depth: f64,
    pub probe_ids: Vec<usize>,
    pub outgoing: Vec<f64>,
    pub incoming: Vec<f64>,
    /// Coordinates in the model's top right-singular subspace of profiles.
    pub reduced: Vec<f64>,
}

impl Fingerprint {
    /// `outgoing ++ incoming`, in probe-list order.
    pub fn profile(&self) -> Vec<f64> {
        self.outgoing.iter().chain(&self.incoming).copied().collect()
    }

    /// Profile reordered by ascending probe id.
    pub fn canonical_profile(&self) -> Vec<f64> {
        let mut order: Vec<usize> = (0..self.probe_ids.len()).collect();
        order.sort_by_key(|&i| self.probe_ids[i]);
        order
            .iter()
            .map(|&i| self.outgoing[i])
            .chain(order.iter().map(|&i| self.incoming[i]))
            .collect()
    }
}

/// Euclidean distance between profiles with entries matched by probe id.
pub fn fingerprint_distance(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    let (pa, pb) = (a.canonical_profile(), b.canonical_profile());
    let mut ia = a.probe_ids.clone();
    let mut ib = b.probe_ids.clone();
    ia.sort_unstable();
    ib.sort_unstable();
    if ia != ib {
        return Err(Error::Config("fingerprints were built from different probe sets".into()));
    }
    Ok(pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Top-`rank` right singular vectors of the stacked profiles, `[2P x rank]`.
fn profile_basis(profiles: &[Vec<f64>], rank: usize) -> DMatrix<f64> {
    let cols = profiles[0].len();
    let f = DMatrix::from_fn(profiles.len(), cols, |i, j| profiles[i][j]);
    // Eigenvectors of F^T F are the right singular vectors.
    let eig = (f.transpose() * &f).symmetric_eigen();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let mut basis = DMatrix::zeros(cols, rank);
    for (k, &idx) in order.iter().take(rank).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // Fix the sign so the largest-magnitude entry is positive.
        let (imax, _) = v.iter().enumerate().fold((0, 0.0f64), |b, (i, x)| if x.abs() > b.1 { (i, x.abs()) } else { b });
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        basis.set_column(k, &v);
    }
    basis
}

fn project(profile: &[f64], basis: &DMatrix<f64>) -> Vec<f64> {
    (basis.transpose() * DVector::from_column_slice(profile)).iter().copied().collect()
}

/// `response_fingerprints`
pub fn response_fingerprints(
    model: &Model,
    tokens: &[usize],
    sites: &[Site],
    probes: &ProbeSet,
    rank: usize,
) -> Result<Vec<Fingerprint>> {
    if rank == 0 || rank > probes.len() {
        return Err(Error::Config(format!(
            "rank {rank} must lie in 1..={} for {} probes",
            probes.len(),
            probes.len()
        )));
    }
    if sites.is_empty() {
        return Err(Error::Config("no sites to fingerprint".into()));
    }
    let n = tokens.len();
    let big_l = model.n_layers();
    for &s in sites {
        model.check_site(s, n)?;
    }
    for p in &probes.probes {
        if p.anchor.token >= n || p.direction.len() != model.width() {
            return Err(Error::Config(format!("probe {} does not fit this model and prompt", p.id)));
        }
    }
    let lin = Linearization::new(model, tokens)?;
    // Per probe: (outgoing norms, incoming norms) at every site.
    let per_probe: Vec<(Vec<f64>, Vec<f64>)> = probes
        .probes
        .par_iter()
        .map(|p| {
            let anchor = Site::new(p.anchor.layer(big_l), p.anchor.token);
            let mut seed = vec![0.0; n * model.width()];
            seed[anchor.token * model.width()..(anchor.token + 1) * model.width()].copy_from_slice(&p.direction);
            let back = lin.vjp_from_layer(anchor.layer, &seed)?;
            let fwd = lin.jvp(anchor, &p.direction)?;
            let out = sites
                .iter()
                .map(|&s| if s.layer <= anchor.layer { norm(back.site(s)) } else { 0.0 })
                .collect();
            let inc = sites.iter().map(|&s| norm(fwd.site(s))).collect();
            Ok((out, inc))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<usize> = probes.probes.iter().map(|p| p.id).collect();
    let mut fps: Vec<Fingerprint> = sites
        .iter()
        .enumerate()
        .map(|(i, &site)| Fingerprint {
            site,
            depth: model.config.normalized_depth(site.layer),
            probe_ids: ids.clone(),
            outgoing: per_probe.iter().map(|p| p.0[i]).collect(),
            incoming: per_probe.iter().map(|p| p.1[i]).collect(),
            reduced: Vec::new(),
        })
        .collect();
    let profiles: Vec<Vec<f64>> = fps.iter().map(Fingerprint::profile).collect();
    let basis = profile_basis(&profiles, rank);
    for (fp, prof) in fps.iter_mut().zip(&profiles) {
        fp.reduced = project(prof, &basis);
    }
    Ok(fps)
}

/// Soft correspondence between the sites of two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMap {
    /// Sites of the source model `M`.
    pub sources: Vec<Site>,
    /// Sites of the target model `M'`.
    pub targets: Vec<Site>,
    /// Row-major `[targets x sources]`, nonnegative.
    pub weights: Vec<f64>,
    pub depth_window: f64,
    pub lambda_rel: f64,
    /// Target sites with no source inside the depth window.
    pub empty_windows: Vec<Site>,
    /// `T(a)` with its weight, per source; `None` when unmapped.
    pub mapping: Vec<Option<(Site, f64)>>,
}

impl TransferMap {
    pub fn weight(&self, target: usize, source: usize) -> f64 {
        self.weights[target * self.sources.len() + source]
    }

    /// Column `a` scaled to unit sum; zero columns stay zero.
    pub fn normalized_column(&self, source: usize) -> Vec<f64> {
        let col: Vec<f64> = (0..self.targets.len()).map(|t| self.weight(t, source)).collect();
        let s: f64 = col.iter().sum();
        if s > 0.0 {
            col.iter().map(|v| v / s).collect()
        } else {
            col
        }
    }

    pub fn mapped(&self) -> usize {
        self.mapping.iter().filter(|m| m.is_some()).count()
    }
}

/// `estimate_intertwiner`: per target site, a ridge fit of its fingerprint
/// on the source fingerprints within `depth_window`, clipped at zero.
///
/// Both models are expressed in the reduced basis of the source model `M`.
pub fn estimate_intertwiner(
    fps_m: &[Fingerprint],
    fps_mp: &[Fingerprint],
    depth_window: f64,
    lambda_rel: f64,
) -> Result<TransferMap> {
    if fps_m.is_empty() || fps_mp.is_empty() {
        return Err(Error::Config("intertwiner needs fingerprints for both models".into()));
    }
    if fps_m.iter().chain(fps_mp).any(|f| f.probe_ids != fps_m[0].probe_ids) {
        return Err(Error::Config("fingerprints were built from different probe sets".into()));
    }
    let tokens = |fps: &[Fingerprint]| fps.iter().map(|f| f.site.token).collect::<std::collections::BTreeSet<_>>();
    if tokens(fps_m) != tokens(fps_mp) {
        return Err(Error::Config("both models need the same token grid".into()));
    }
    if !(depth_window > 0.0) || !(lambda_rel >= 0.0) {
        return Err(Error::Config("depth window must be positive and ridge strength nonnegative".into()));
    }
    let rank = fps_m[0].reduced.len().max(1);
    let basis = profile_basis(&fps_m.iter().map(Fingerprint::profile).collect::<Vec<_>>(), rank);
    let xm: Vec<Vec<f64>> = fps_m.iter().map(|f| project(&f.profile(), &basis)).collect();
    let ns = fps_m.len();

    let rows: Vec<Option<Vec<f64>>> = fps_mp
        .par_iter()
        .map(|t| {
            let window: Vec<usize> = (0..ns).filter(|&a| (fps_m[a].depth - t.depth).abs() < depth_window).collect();
            if window.is_empty() {
                return Ok(None);
            }
            let y = DVector::from_vec(project(&t.profile(), &basis));
            let x = DMatrix::from_fn(rank, window.len(), |i, j| xm[window[j]][i]);
            let gram = x.transpose() * &x;
            let rhs = x.transpose() * y;
            let coef = if lambda_rel > 0.0 {
                let eig_max = gram.clone().symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(*v));
                let mut reg = gram;
                for i in 0..window.len() {
                    reg[(i, i)] += lambda_rel * eig_max.max(f64::MIN_POSITIVE);
                }
                reg.cholesky()
                    .ok_or_else(|| Error::NonFinite("intertwiner system is not positive definite".into()))?
                    .solve(&rhs)
            } else {
                gram.svd(true, true)
                    .solve(&rhs, 1e-12)
                    .map_err(|e| Error::NonFinite(format!("intertwiner pseudoinverse failed: {e}")))?
            };
            let mut row = vec![0.0; ns];
            for (c, &a) in coef.iter().zip(&window) {
                row[a] = c.max(0.0);
            }
            Ok(Some(row))
        })
        .collect::<Result<_>>()?;

    let mut weights = Vec::with_capacity(fps_mp.len() * ns);
    let mut empty_windows = Vec::new();
    for (t, row) in fps_mp.iter().zip(rows) {
        match row {
            Some(r) => weights.extend(r),
            None => {
                empty_windows.push(t.site);
                weights.extend(std::iter::repeat(0.0).take(ns));
            }
        }
    }
    let sources: Vec<Site> = fps_m.iter().map(|f| f.site).collect();
    let targets: Vec<Site> = fps_mp.iter().map(|f| f.site).collect();
    let mapping = transfer_map(&sources, &targets, &weights, UNMAPPED_BELOW)?;
    Ok(TransferMap {
        sources,
        targets,
        weights,
        depth_window,
        lambda_rel,
        empty_windows,
        mapping,
    })
}

/// `transfer_map`: `T(a) = argmax_a' |P[a', a]|`, ties to the lower layer
/// then the lower token; columns whose maximum is at most `min_weight` are
/// unmapped.
pub fn transfer_map(
    sources: &[Site],
    targets: &[Site],
    weights: &[f64],
    min_weight: f64,
) -> Result<Vec<Option<(Site, f64)>>> {
    if weights.len() != sources.len() * targets.len() {
        return Err(Error::Config("weight matrix does not match the site lists".into()));
    }
    Ok((0..sources.len())
        .map(|a| {
            let mut best: Option<(Site, f64)> = None;
            for (t, &site) in targets.iter().enumerate() {
                let w = weights[t * sources.len() + a].abs();
                let better = match best {
                    None => true,
                    Some((bs, bw)) => w > bw || (w == bw && site < bs),
                };
                if better {
                    best = Some((site, w));
                }
            }
            best.filter(|&(_, w)| w > min_weight)
        })
        .collect())
}

/// `refine_depth`: every block repeated `factor` times with its residual
/// update scaled by `1 / factor`. Layer `l` of the original corresponds to
/// layer `factor * l` of the refined model.
pub fn refine_depth(model: &Model, factor: usize) -> Result<Model> {
    if factor == 0 {
        return Err(Error::Config("refinement factor must be at least 1".into()));
    }
    let config = ModelConfig {
        n_layers: model.config.n_layers * factor,
        residual_scale: model.config.residual_scale / factor as f64,
        ..model.config.clone()
    };
    let blocks = model
        .params
        .blocks
        .iter()
        .flat_map(|b| std::iter::repeat(b.clone()).take(factor))
        .collect();
    let params = Parameters {
        blocks,
        ..model.params.clone()
    };
    Model::from_parts(config, params)
}

/// Every site of a `layers x tokens` grid in layer-major order.
pub fn all_sites(n_layers: usize, n_tokens: usize) -> Vec<Site> {
    (0..=n_layers).flat_map(|l| (0..n_tokens).map(move |x| Site::new(l, x))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Vec<usize>, ProbeSet) {
        let m = Model::init(ModelConfig::small(0)).unwrap();
        let t = vec![4, 19, 33, 7, 51, 12, 28, 60];
        let probes = ProbeSet::spread(8, 32, &mut RngStream::new(0).child_named("probes")).unwrap();
        (m, t, probes)
    }

    #[test]
    fn fingerprint_basics() {
        let (m, t, probes) = setup();
        assert_eq!(probes.len(), 32);
        let sites = [Site::new(2, 3), Site::new(2, 3)];
        let f = response_fingerprints(&m, &t, &sites, &probes, 8).unwrap();
        assert_eq!(f[0], f[1]);
        assert!(response_fingerprints(&m, &t, &sites, &probes, 33).is_err());
        // The final-layer last-token site reaches only anchors at that site.
        let last = response_fingerprints(&m, &t, &[Site::new(4, 7)], &probes, 4).unwrap();
        for (p, &v) in probes.probes.iter().zip(&last[0].outgoing) {
            if p.anchor.layer(4) < 4 || p.anchor.token < 7 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn probe_order_invariance() {
        let (m, t, probes) = setup();
        let mut rev = probes.clone();
        rev.probes.reverse();
        let sites = [Site::new(1, 2), Site::new(3, 5)];
        let a = response_fingerprints(&m, &t, &sites, &probes, 8).unwrap();
        let b = response_fingerprints(&m, &t, &sites, &rev, 8).unwrap();
        let da = fingerprint_distance(&a[0], &a[1]).unwrap();
        let db = fingerprint_distance(&b[0], &b[1]).unwrap();
        assert!((da - db).abs() < 1e-12);
        assert_eq!(a[0].canonical_profile(), b[0].canonical_profile());
    }

    #[test]
    fn self_match_and_permutation() {
        let (m, t, probes) = setup();
        let sites = all_sites(4, 8);
        let fps = response_fingerprints(&m, &t, &sites, &probes, 32).unwrap();
        let map = estimate_intertwiner(&fps, &fps, 1.5 / 4.0, 1e-8).unwrap();
        let hits = map.mapping.iter().zip(&sites).filter(|(m, s)| m.map(|x| x.0) == Some(**s)).count();
        assert!(hits as f64 >= 0.95 * sites.len() as f64, "self-match {hits}/{}", sites.len());

        // Relabel tokens within each layer by a fixed permutation.
        let perm = [3, 0, 6, 1, 7, 2, 5, 4];
        let relabeled: Vec<Fingerprint> = fps
            .iter()
            .map(|f| Fingerprint {
                site: Site::new(f.site.layer, perm[f.site.token]),
                ..f.clone()
            })
            .collect();
        let map = estimate_intertwiner(&fps, &relabeled, 1.5 / 4.0, 1e-8).unwrap();
        let hits = map
            .mapping
            .iter()
            .zip(&sites)
            .filter(|(m, s)| m.map(|x| x.0) == Some(Site::new(s.layer, perm[s.token])))
            .count();
        assert!(hits as f64 >= 0.95 * sites.len() as f64, "permutation {hits}/{}", sites.len());
    }

    #[test]
    fn depth_neighbours_are_closer_than_token_neighbours() {
        let (m, t, probes) = setup();
        let sites = all_sites(4, 8);
        let fps = response_fingerprints(&m, &t, &sites, &probes, 32).unwrap();
        let at = |l: usize, x: usize| &fps[l * 8 + x];
        let (mut wins, mut total) = (0, 0);
        for l in 0..4 {
            for x in 0..8 {
                let up = fingerprint_distance(at(l, x), at(l + 1, x)).unwrap();
                let side = fingerprint_distance(at(l, x), at(l, (x + 1) % 8)).unwrap();
                wins += usize::from(up < side);
                total += 1;
            }
        }
        assert!(2 * wins > total, "depth neighbour closer at {wins}/{total} sites");
    }

    #[test]
    fn ridge_limit_unmaps_everything() {
        let (m, t, probes) = setup();
        let sites = all_sites(4, 8);
        let fps = response_fingerprints(&m, &t, &sites, &probes, 16).unwrap();
        let map = estimate_intertwiner(&fps, &fps, 0.4, 1e9).unwrap();
        assert!(map.weights.iter().all(|&w| w < 1e-6));
        assert_eq!(map.mapped(), 0);
        let short: Vec<Fingerprint> = fps.iter().filter(|f| f.site.token < 4).cloned().collect();
        assert!(estimate_intertwiner(&fps, &short, 0.4, 1e-8).is_err());
    }

    #[test]
    fn transfer_map_rules() {
        let s = vec![Site::new(0, 0), Site::new(1, 0), Site::new(2, 0)];
        let id: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let m = transfer_map(&s, &s, &id, 0.0).unwrap();
        assert_eq!(m.iter().map(|x| x.unwrap().0).collect::<Vec<_>>(), s);
        let mut single = vec![0.0; 9];
        single[2 * 3] = 0.4; // target 2, source 0
        single[1] = -0.7; // target 0, source 1
        let m = transfer_map(&s, &s, &single, 0.0).unwrap();
        assert_eq!(m[0].unwrap().0, s[2]);
        assert_eq!(m[1].unwrap().0, s[0]);
        assert!(m[2].is_none());
        let tie = vec![0.5; 9];
        assert_eq!(transfer_map(&s, &s, &tie, 0.0).unwrap()[1].unwrap().0, s[0]);
    }

    #[test]
    fn refinement() {
        let (m, t, _) = setup();
        assert_eq!(refine_depth(&m, 1).unwrap(), m);
        let r2 = refine_depth(&m, 2).unwrap();
        let r4 = refine_depth(&m, 4).unwrap();
        assert_eq!(r2.n_layers(), 8);
        assert_eq!(r2.config.residual_scale, 0.5);
        let l1 = m.forward(&t).unwrap().logits;
        let l2 = r2.forward(&t).unwrap().logits;
        let l4 = r4.forward(&t).unwrap().logits;
        let dist = |a: &crate::numeric::Tensor, b: &crate::numeric::Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        // Successive refinements converge: each halving of the step moves less.
        assert!(dist(&l4, &l2) < dist(&l2, &l1));
    }
}
