// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inverse patch inference in the linear regime.
//!
//! Scalar targets have a closed form: on an allowed support `S` with
//! projected sensitivities `b_s = P_s a(s)`, the minimal-norm source with
//! `sum_s a(s) · J_s = dy*` is `J_s = dy* b_s / sum_t ||b_t||^2`.
//!
//! Residual-field targets are fit over a dictionary of atoms
//! `(site, unit direction)` whose first-order responses are probed by JVP,
//! either by ridge least squares or by orthogonal matching pursuit under a
//! sparsity budget.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Linearization;
use crate::error::{Error, Result};
use crate::field::{SensitivityField, Site};
use crate::intervention::{CleanRun, PatchSource, Projection};
use crate::metrics::DEFAULT_TAU;
use crate::model::{Model, Observable};
use crate::numeric::{dot, norm, EPS0};

/// Default ridge strength, relative to the largest Gram eigenvalue.
pub const DEFAULT_LAMBDA_REL: f64 = 1e-6;

/// Sites and directions a source may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSet {
    pub sites: Vec<Site>,
    /// One projection per site; empty means identity everywhere.
    #[serde(default)]
    pub projections: Vec<Projection>,
    /// Maximum number of active sites.
    #[serde(default)]
    pub sparsity: Option<usize>,
    /// Maximum Euclidean norm of the whole source.
    #[serde(default)]
    pub max_norm: Option<f64>,
}

impl AdmissibleSet {
    pub fn new(sites: Vec<Site>) -> Self {
        Self {
            sites,
            projections: Vec::new(),
            sparsity: None,
            max_norm: None,
        }
    }

    pub fn with_sparsity(mut self, k: usize) -> Self {
        self.sparsity = Some(k);
        self
    }

    fn projection(&self, i: usize) -> &Projection {
        self.projections.get(i).unwrap_or(&Projection::Identity)
    }

    fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Config("admissible set has no sites".into()));
        }
        if !self.projections.is_empty() && self.projections.len() != self.sites.len() {
            return Err(Error::Config("admissible set needs one projection per site".into()));
        }
        if self.sparsity == Some(0) {
            return Err(Error::Config("sparsity budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSolution {
    /// Active sources: unit direction and amplitude per atom or site.
    pub sources: Vec<PatchSource>,
    /// Linear prediction of `dy` (scalar targets).
    pub predicted_dy: Option<f64>,
    /// Atom coefficients in dictionary order (field targets).
    pub coefficients: Vec<f64>,
    /// `||target - prediction||`.
    pub residual_norm: f64,
    /// The system was rank deficient and solved in the minimal-norm sense.
    pub rank_deficient: bool,
}

impl InferenceSolution {
    pub fn source_norm(&self) -> f64 {
        // Sources at one site may share a token row; combine before measuring.
        let mut rows: Vec<(Site, Vec<f64>)> = Vec::new();
        for s in &self.sources {
            let delta = s.delta();
            match rows.iter_mut().find(|(site, _)| *site == s.site) {
                Some((_, acc)) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => rows.push((s.site, delta)),
            }
        }
        rows.iter().map(|(_, v)| dot(v, v)).sum::<f64>().sqrt()
    }

    pub fn support(&self) -> Vec<Site> {
        let mut s: Vec<Site> = self.sources.iter().map(|p| p.site).collect();
        s.sort();
        s.dedup();
        s
    }
}

fn source(site: Site, v: &[f64]) -> PatchSource {
    let n = norm(v);
    let dir = if n > 0.0 { v.iter().map(|x| x / n).collect() } else { v.to_vec() };
    PatchSource::new(site, dir, n)
}

/// `solve_scalar_target`
pub fn solve_scalar_target(a: &SensitivityField, set: &AdmissibleSet, target: f64) -> Result<InferenceSolution> {
    set.validate()?;
    let mut cands: Vec<(usize, Site, Vec<f64>, f64)> = Vec::with_capacity(set.sites.len());
    for (i, &site) in set.sites.iter().enumerate() {
        if site.layer >= a.layers() || site.token >= a.tokens() {
            return Err(Error::OutOfRange(format!("allowed site {site} outside the sensitivity field")));
        }
        let b = set.projection(i).apply(a.site(site));
        let s = norm(&b);
        cands.push((i, site, b, s));
    }
    // Greedy selection by projected score; ties keep the listed order.
    cands.sort_by(|x, y| y.3.total_cmp(&x.3).then(x.0.cmp(&y.0)));
    if let Some(k) = set.sparsity {
        cands.truncate(k);
    }
    let denom: f64 = cands.iter().map(|c| c.3 * c.3).sum();
    if denom <= EPS0 * EPS0 {
        return Err(Error::Infeasible("every allowed site has zero projected sensitivity".into()));
    }
    let scale = target / denom;
    let sources: Vec<PatchSource> = cands
        .iter()
        .filter(|c| c.3 > 0.0)
        .map(|c| source(c.1, &c.2.iter().map(|v| v * scale).collect::<Vec<_>>()))
        .collect();
    let sol = InferenceSolution {
        predicted_dy: Some(target),
        coefficients: Vec::new(),
        residual_norm: 0.0,
        rank_deficient: false,
        sources,
    };
    if let Some(max) = set.max_norm {
        let n = sol.source_norm();
        if n > max {
            return Err(Error::Infeasible(format!("minimal source norm {n:.4e} exceeds the budget {max:.4e}")));
        }
    }
    Ok(sol)
}

/// A dictionary element: unit `direction` at `site`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub site: Site,
    pub direction: Vec<f64>,
}

/// Standard-basis atoms at every site.
pub fn basis_atoms(sites: &[Site], width: usize) -> Vec<Atom> {
    sites
        .iter()
        .flat_map(|&site| {
            (0..width).map(move |i| {
                let mut e = vec![0.0; width];
                e[i] = 1.0;
                Atom { site, direction: e }
            })
        })
        .collect()
}

/// One atom per site along the local sensitivity direction; zero-gradient sites are skipped.
pub fn sensitivity_atoms(a: &SensitivityField, sites: &[Site]) -> Vec<Atom> {
    sites
        .iter()
        .filter_map(|&site| {
            let g = a.site(site);
            let n = norm(g);
            (n > 0.0).then(|| Atom {
                site,
                direction: g.iter().map(|v| v / n).collect(),
            })
        })
        .collect()
}

/// Residual values on a declared set of readout slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetField {
    pub slices: Vec<Site>,
    /// Concatenated `d`-vectors, one per slice.
    pub values: Vec<f64>,
}

/// Green columns of each atom restricted to `slices`, via JVP probes.
pub fn probe_atoms(model: &Model, tokens: &[usize], atoms: &[Atom], slices: &[Site]) -> Result<Vec<Vec<f64>>> {
    let lin = Linearization::new(model, tokens)?;
    for &s in slices {
        model.check_site(s, tokens.len())?;
    }
    atoms
        .par_iter()
        .map(|atom| {
            let t = lin.jvp(atom.site, &atom.direction)?;
            Ok(slices.iter().flat_map(|&s| t.site(s).iter().copied()).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSolverConfig {
    /// Ridge strength relative to the largest Gram eigenvalue; 0 selects the pseudoinverse.
    pub lambda_rel: f64,
    /// Greedy matching pursuit with this many atoms; `None` fits all atoms.
    pub sparsity: Option<usize>,
}

impl Default for ResidualSolverConfig {
    fn default() -> Self {
        Self {
            lambda_rel: DEFAULT_LAMBDA_REL,
            sparsity: None,
        }
    }
}

struct Fit {
    coef: Vec<f64>,
    residual: f64,
    rank_deficient: bool,
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>, lambda_rel: f64) -> Result<Fit> {
    let p = a.ncols();
    let gram = a.transpose() * a;
    let eig_max = gram.clone().symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(*v));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = smax * 1e-10 * (a.nrows().max(p) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let rank_deficient = rank < p;
    let coef = if lambda_rel > 0.0 {
        let lambda = lambda_rel * eig_max;
        let mut reg = gram;
        for i in 0..p {
            reg[(i, i)] += lambda;
        }
        let rhs = a.transpose() * b;
        reg.cholesky()
            .ok_or_else(|| Error::NonFinite("ridge system is not positive definite".into()))?
            .solve(&rhs)
    } else {
        svd.solve(b, tol).map_err(|e| Error::NonFinite(format!("pseudoinverse failed: {e}")))?
    };
    let residual = (a * &coef - b).norm();
    Ok(Fit {
        coef: coef.iter().copied().collect(),
        residual,
        rank_deficient,
    })
}

/// `solve_residual_target`
pub fn solve_residual_target(
    atoms: &[Atom],
    columns: &[Vec<f64>],
    target: &TargetField,
    cfg: ResidualSolverConfig,
) -> Result<InferenceSolution> {
    if atoms.is_empty() || atoms.len() != columns.len() {
        return Err(Error::Config("need one probed column per atom".into()));
    }
    let m = target.values.len();
    if columns.iter().any(|c| c.len() != m) {
        return Err(Error::Config("column length does not match the target".into()));
    }
    if !(cfg.lambda_rel >= 0.0) {
        return Err(Error::Config("ridge strength must be nonnegative".into()));
    }
    let b = DVector::from_column_slice(&target.values);
    let full = DMatrix::from_fn(m, atoms.len(), |i, j| columns[j][i]);
    let (coefficients, residual, rank_deficient) = match cfg.sparsity {
        None => {
            let fit = least_squares(&full, &b, cfg.lambda_rel)?;
            (fit.coef, fit.residual, fit.rank_deficient)
        }
        Some(k) => {
            if k == 0 {
                return Err(Error::Config("sparsity budget must be at least 1".into()));
            }
            let norms: Vec<f64> = columns.iter().map(|c| norm(c)).collect();
            let mut chosen: Vec<usize> = Vec::new();
            let mut coef = vec![0.0; atoms.len()];
            let mut r = b.clone();
            let mut rank_deficient = false;
            while chosen.len() < k.min(atoms.len()) && r.norm() > 0.0 {
                let corr = full.transpose() * &r;
                let next = (0..atoms.len())
                    .filter(|j| !chosen.contains(j) && norms[*j] > 0.0)
                    .max_by(|&x, &y| (corr[x].abs() / norms[x]).total_cmp(&(corr[y].abs() / norms[y])).then(y.cmp(&x)));
                let Some(j) = next else { break };
                chosen.push(j);
                let sub = full.select_columns(&chosen);
                let fit = least_squares(&sub, &b, cfg.lambda_rel)?;
                rank_deficient |= fit.rank_deficient;
                coef.iter_mut().for_each(|c| *c = 0.0);
                for (c, &idx) in fit.coef.iter().zip(&chosen) {
                    coef[idx] = *c;
                }
                r = &b - &sub * DVector::from_vec(fit.coef);
            }
            let res = r.norm();
            (coef, res, rank_deficient)
        }
    };
    let sources = atoms
        .iter()
        .zip(&coefficients)
        .filter(|(_, &c)| c != 0.0)
        .map(|(atom, &c)| PatchSource::new(atom.site, atom.direction.clone(), c))
        .collect();
    Ok(InferenceSolution {
        sources,
        predicted_dy: None,
        coefficients,
        residual_norm: residual,
        rank_deficient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValidationTarget {
    Scalar { obs: Observable, target: f64 },
    Field(TargetField),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Measured `dy` or `||dR||` on the target slices.
    pub achieved: f64,
    /// `dy* ` or `||dR*||`.
    pub target: f64,
    /// Projection of the achieved shift on the target, relative to the target.
    pub achievement: f64,
    pub relative_error: f64,
    /// Relative error below the perturbative threshold.
    pub in_band: bool,
}

/// `validate_solution`: applies the inferred source as a true patch.
pub fn validate_solution(
    model: &Model,
    tokens: &[usize],
    solution: &InferenceSolution,
    target: &ValidationTarget,
) -> Result<ValidationReport> {
    let clean = CleanRun::new(model, tokens)?;
    let patched = clean.patch(&solution.sources)?;
    let (achieved, goal, achievement, relative_error) = match target {
        ValidationTarget::Scalar { obs, target } => {
            let dy = model.observe(&patched.residuals, obs)? - clean.y(obs)?;
            let den = target.abs().max(EPS0);
            (dy, *target, dy * target.signum() / den, (dy - target).abs() / den)
        }
        ValidationTarget::Field(t) => {
            let mut got = Vec::with_capacity(t.values.len());
            for &s in &t.slices {
                model.check_site(s, tokens.len())?;
                got.extend(patched.residuals.site(s).iter().zip(clean.residuals().site(s)).map(|(p, c)| p - c));
            }
            let tn = norm(&t.values);
            let den = tn.max(EPS0);
            let err: Vec<f64> = got.iter().zip(&t.values).map(|(g, v)| g - v).collect();
            (norm(&got), tn, dot(&got, &t.values) / (den * den), norm(&err) / den)
        }
    };
    Ok(ValidationReport {
        achieved,
        target: goal,
        achievement,
        relative_error,
        in_band: relative_error < DEFAULT_TAU,
    })
}
