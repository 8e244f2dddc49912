// SPDX-License-Identifier: MIT OR Apache-2.0

//! Component-level Green slices `G(i, i') = dR_l(x, i) / dR_l'(x', i')`
//! between two fixed sites, and their energy concentration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Linearization;
use crate::error::Result;
use crate::field::Site;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreenMethod {
    /// `d` forward probes, one column each.
    Jvp,
    /// `d` reverse probes, one row each.
    Vjp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenSlice {
    pub source: Site,
    pub target: Site,
    pub width: usize,
    /// Row-major `[width x width]`; row `i` is the target component.
    pub matrix: Vec<f64>,
    /// False when the target lies outside the source's causal cone.
    pub causal: bool,
}

impl GreenSlice {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.width + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.matrix.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(mean |diagonal|, mean |off-diagonal|)`.
    pub fn diagonal_dominance(&self) -> (f64, f64) {
        let d = self.width;
        let (mut diag, mut off) = (0.0, 0.0);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    diag += self.get(i, j).abs();
                } else {
                    off += self.get(i, j).abs();
                }
            }
        }
        (diag / d as f64, off / (d * d - d).max(1) as f64)
    }
}

/// `green_slice`
pub fn green_slice(
    model: &Model,
    tokens: &[usize],
    source: Site,
    target: Site,
    method: GreenMethod,
) -> Result<GreenSlice> {
    green_slice_with(&Linearization::new(model, tokens)?, source, target, method)
}

/// [`green_slice`] on an existing linearization.
pub fn green_slice_with(lin: &Linearization, source: Site, target: Site, method: GreenMethod) -> Result<GreenSlice> {
    let n = lin.tokens().len();
    lin.model().check_site(source, n)?;
    lin.model().check_site(target, n)?;
    let d = lin.model().width();
    let mut matrix = vec![0.0; d * d];
    let causal = target.is_downstream_of(source);
    if causal {
        match method {
            GreenMethod::Jvp => {
                let cols: Vec<Vec<f64>> = (0..d)
                    .into_par_iter()
                    .map(|j| {
                        let mut e = vec![0.0; d];
                        e[j] = 1.0;
                        Ok(lin.jvp(source, &e)?.site(target).to_vec())
                    })
                    .collect::<Result<_>>()?;
                for (j, col) in cols.iter().enumerate() {
                    for i in 0..d {
                        matrix[i * d + j] = col[i];
                    }
                }
            }
            GreenMethod::Vjp => {
                let rows: Vec<Vec<f64>> = (0..d)
                    .into_par_iter()
                    .map(|i| Ok(lin.vjp_component(target, i)?.site(source).to_vec()))
                    .collect::<Result<_>>()?;
                for (i, row) in rows.iter().enumerate() {
                    matrix[i * d..(i + 1) * d].copy_from_slice(row);
                }
            }
        }
    }
    Ok(GreenSlice {
        source,
        target,
        width: d,
        matrix,
        causal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Entry magnitudes, descending.
    pub sorted: Vec<f64>,
    /// `cumulative[k]` is the fraction of `||G||_F^2` in the top `k + 1` entries.
    pub cumulative: Vec<f64>,
    pub entries_50: usize,
    pub entries_90: usize,
    pub entries_99: usize,
    /// Zero matrix: the curve carries no information.
    pub degenerate: bool,
}

impl Concentration {
    /// Entries needed to reach `fraction` of the energy.
    pub fn entries_for(&self, fraction: f64) -> usize {
        if self.degenerate {
            return 0;
        }
        self.cumulative
            .iter()
            .position(|&c| c >= fraction - 1e-12)
            .map_or(self.cumulative.len(), |k| k + 1)
    }
}

/// `slice_concentration`
pub fn slice_concentration(g: &GreenSlice) -> Concentration {
    let mut sorted: Vec<f64> = g.matrix.iter().map(|v| v.abs()).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().map(|v| v * v).sum();
    let degenerate = total == 0.0;
    let mut acc = 0.0;
    let cumulative = sorted
        .iter()
        .map(|v| {
            acc += v * v;
            if degenerate {
                0.0
            } else {
                acc / total
            }
        })
        .collect();
    let mut c = Concentration {
        sorted,
        cumulative,
        entries_50: 0,
        entries_90: 0,
        entries_99: 0,
        degenerate,
    };
    c.entries_50 = c.entries_for(0.5);
    c.entries_90 = c.entries_for(0.9);
    c.entries_99 = c.entries_for(0.99);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numeric::RngStream;

    fn setup() -> (Model, Vec<usize>) {
        let m = Model::init(ModelConfig::small(0)).unwrap();
        let mut r = RngStream::new(3);
        let t = (0..8).map(|_| r.below(64)).collect();
        (m, t)
    }

    fn slice(width: usize, matrix: Vec<f64>) -> GreenSlice {
        GreenSlice {
            source: Site::new(0, 0),
            target: Site::new(0, 0),
            width,
            matrix,
            causal: true,
        }
    }

    #[test]
    fn identity_and_acausal() {
        let (m, t) = setup();
        let lin = Linearization::new(&m, &t).unwrap();
        for method in [GreenMethod::Jvp, GreenMethod::Vjp] {
            let g = green_slice_with(&lin, Site::new(2, 3), Site::new(2, 3), method).unwrap();
            for i in 0..32 {
                for j in 0..32 {
                    assert_eq!(g.get(i, j), if i == j { 1.0 } else { 0.0 });
                }
            }
            let z = green_slice_with(&lin, Site::new(1, 5), Site::new(3, 4), method).unwrap();
            assert!(!z.causal);
            assert!(z.matrix.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn methods_agree() {
        let (m, t) = setup();
        let lin = Linearization::new(&m, &t).unwrap();
        let (s, g) = (Site::new(0, 2), Site::new(3, 6));
        let a = green_slice_with(&lin, s, g, GreenMethod::Jvp).unwrap();
        let b = green_slice_with(&lin, s, g, GreenMethod::Vjp).unwrap();
        for (x, y) in a.matrix.iter().zip(&b.matrix) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_concentration() {
        let mut id = vec![0.0; 16];
        for i in 0..4 {
            id[i * 5] = 1.0;
        }
        let c = slice_concentration(&slice(4, id));
        assert_eq!(c.entries_for(1.0), 4);
        assert_eq!(c.entries_50, 2);
        assert!((c.cumulative[3] - 1.0).abs() < 1e-15);
        assert!(slice_concentration(&slice(2, vec![0.0; 4])).degenerate);
    }

    #[test]
    fn rank_one_concentration() {
        let u = [3.0, -1.0, 0.5];
        let v = [2.0, 0.25, -4.0];
        let m: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let c = slice_concentration(&slice(3, m));
        // Energy of the product entries is (u_i v_j)^2 / (|u|^2 |v|^2).
        let uu: f64 = u.iter().map(|x| x * x).sum();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut e: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| (a * b).powi(2) / (uu * vv))).collect();
        e.sort_by(|a, b| b.total_cmp(a));
        let mut acc = 0.0;
        for (k, w) in e.iter().enumerate() {
            acc += w;
            assert!((c.cumulative[k] - acc).abs() < 1e-12);
        }
    }
}
