// SPDX-License-Identifier: MIT OR Apache-2.0

//! Site scores `s(l, x) = ||a(l, x)||`.

use serde::{Deserialize, Serialize};

use crate::field::{SensitivityField, Site};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteScoreField {
    pub layers: usize,
    pub tokens: usize,
    pub scores: Vec<f64>,
}

/// `site_scores`
pub fn site_scores(a: &SensitivityField) -> SiteScoreField {
    SiteScoreField {
        layers: a.layers(),
        tokens: a.tokens(),
        scores: a.site_norms(),
    }
}

impl SiteScoreField {
    pub fn at(&self, site: Site) -> f64 {
        self.scores[site.layer * self.tokens + site.token]
    }

    /// Sum of scores over tokens, per layer.
    pub fn layer_marginal(&self) -> Vec<f64> {
        self.scores.chunks(self.tokens).map(|r| r.iter().sum()).collect()
    }

    /// Sum of scores over layers, per token.
    pub fn token_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.tokens];
        for row in self.scores.chunks(self.tokens) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// All sites by descending score; ties go to the lower layer, then lower token.
    pub fn ranked(&self) -> Vec<(Site, f64)> {
        let mut v: Vec<(Site, f64)> = self
            .scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (Site::new(i / self.tokens, i % self.tokens), s))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn top_k(&self, k: usize) -> Vec<(Site, f64)> {
        let mut r = self.ranked();
        r.truncate(k);
        r
    }

    /// Fraction of `sum s^2` carried by the top `k` sites.
    pub fn coverage(&self, k: usize) -> f64 {
        let total: f64 = self.scores.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 0.0;
        }
        self.top_k(k).iter().map(|(_, s)| s * s).sum::<f64>() / total
    }

    /// Smallest `k` whose coverage reaches `fraction`.
    pub fn sites_for_coverage(&self, fraction: f64) -> usize {
        let total: f64 = self.scores.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 0;
        }
        let mut acc = 0.0;
        for (i, (_, s)) in self.ranked().iter().enumerate() {
            acc += s * s;
            if acc >= fraction * total * (1.0 - 1e-12) {
                return i + 1;
            }
        }
        self.scores.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;

    #[test]
    fn zero_field() {
        let s = site_scores(&SensitivityField(Field::zeros(3, 4, 2)));
        assert!(s.scores.iter().all(|&v| v == 0.0));
        assert_eq!(s.coverage(3), 0.0);
    }

    #[test]
    fn ranking_and_coverage() {
        let mut f = Field::zeros(2, 3, 2);
        f.at_mut(1, 2).copy_from_slice(&[3.0, 4.0]);
        f.at_mut(0, 1).copy_from_slice(&[0.0, 1.0]);
        f.at_mut(1, 0).copy_from_slice(&[1.0, 0.0]);
        let s = site_scores(&SensitivityField(f));
        assert_eq!(s.at(Site::new(1, 2)), 5.0);
        let r = s.ranked();
        assert_eq!(r[0].0, Site::new(1, 2));
        assert_eq!(r[1].0, Site::new(0, 1), "tie goes to the lower layer");
        assert!((s.coverage(1) - 25.0 / 27.0).abs() < 1e-12);
        assert_eq!(s.sites_for_coverage(0.9), 1);
        assert_eq!(s.sites_for_coverage(1.0), 3);
        assert_eq!(s.layer_marginal(), vec![1.0, 6.0]);
        assert_eq!(s.token_marginal(), vec![1.0, 1.0, 5.0]);
    }
}
