// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-order prediction `dy ≈ eps * a(l*, x*) · P(J)` and its error summary.
//!
//! Regime labels, checked in this order:
//!
//! | label      | rule                             |
//! |------------|----------------------------------|
//! | low-signal | `abs(dy_meas) <= 10 * eps0`      |
//! | good       | `E_rel < 0.1`                    |
//! | nonlinear  | `E_rel >= 0.5`                   |
//! | mixed      | otherwise                        |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SensitivityField;
use crate::intervention::PatchSource;
use crate::numeric::{dot, median, quantile};

pub const GOOD_BELOW: f64 = 0.1;
pub const NONLINEAR_FROM: f64 = 0.5;
pub const LOW_SIGNAL_FACTOR: f64 = 10.0;

/// `predict_dy`: `eps * sum over the support of a(l, x*) · P(J)`.
pub fn predict_dy(a: &SensitivityField, patch: &PatchSource) -> Result<f64> {
    let site = patch.site;
    if *patch.layers().end() >= a.layers() || site.token >= a.tokens() || patch.direction.len() != a.width() {
        return Err(Error::Config(format!(
            "patch at {site} does not fit a sensitivity field of {} x {} x {}",
            a.layers(),
            a.tokens(),
            a.width()
        )));
    }
    let pj = patch.projection.apply(&patch.direction);
    Ok(patch.amplitude * patch.layers().map(|l| dot(a.at(l, site.token), &pj)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Good,
    Mixed,
    LowSignal,
    Nonlinear,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Good => "good",
            Regime::Mixed => "mixed",
            Regime::LowSignal => "low-signal",
            Regime::Nonlinear => "nonlinear",
        }
    }

    pub fn classify(dy_meas: f64, e_rel: f64, eps0: f64) -> Self {
        if dy_meas.abs() <= LOW_SIGNAL_FACTOR * eps0 {
            Regime::LowSignal
        } else if e_rel < GOOD_BELOW {
            Regime::Good
        } else if e_rel >= NONLINEAR_FROM {
            Regime::Nonlinear
        } else {
            Regime::Mixed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dy_meas: f64,
    pub dy_pred: f64,
    pub e_abs: f64,
    pub e_rel: f64,
    /// `abs(dy_meas) <= eps0`: `e_rel` is a floor artifact and is not aggregated.
    pub low_signal: bool,
    pub regime: Regime,
}

impl PredictionRecord {
    pub fn new(dy_meas: f64, dy_pred: f64, eps0: f64) -> Self {
        let e_abs = (dy_meas - dy_pred).abs();
        let e_rel = e_abs / dy_meas.abs().max(eps0);
        Self {
            dy_meas,
            dy_pred,
            e_abs,
            e_rel,
            low_signal: dy_meas.abs() <= eps0,
            regime: Regime::classify(dy_meas, e_rel, eps0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub records: Vec<PredictionRecord>,
    pub median_e_abs: f64,
    /// Over records without the low-signal flag; `None` if there are none.
    pub median_e_rel: Option<f64>,
    pub q90_e_rel: Option<f64>,
    pub low_signal: usize,
    /// Counts for good, mixed, low-signal, nonlinear.
    pub regime_counts: [usize; 4],
}

/// `prediction_errors`
pub fn prediction_errors(pairs: &[(f64, f64)], eps0: f64) -> PredictionSummary {
    let records: Vec<PredictionRecord> = pairs.iter().map(|&(m, p)| PredictionRecord::new(m, p, eps0)).collect();
    let abs: Vec<f64> = records.iter().map(|r| r.e_abs).collect();
    let rel: Vec<f64> = records.iter().filter(|r| !r.low_signal).map(|r| r.e_rel).collect();
    let mut regime_counts = [0; 4];
    for r in &records {
        let i = match r.regime {
            Regime::Good => 0,
            Regime::Mixed => 1,
            Regime::LowSignal => 2,
            Regime::Nonlinear => 3,
        };
        regime_counts[i] += 1;
    }
    PredictionSummary {
        median_e_abs: median(&abs).unwrap_or(0.0),
        median_e_rel: median(&rel),
        q90_e_rel: quantile(&rel, 0.9),
        low_signal: records.iter().filter(|r| r.low_signal).count(),
        regime_counts,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Field, Site};
    use crate::numeric::{RngStream, EPS0};
    use proptest::prelude::*;

    fn field(seed: u64) -> SensitivityField {
        let mut f = Field::zeros(3, 4, 5);
        let mut r = RngStream::new(seed);
        for v in f.data_mut() {
            *v = r.next_normal();
        }
        SensitivityField(f)
    }

    #[test]
    fn cauchy_schwarz_extremes() {
        let a = field(1);
        let site = Site::new(1, 2);
        let g = a.site(site).to_vec();
        let n = crate::numeric::norm(&g);
        let unit: Vec<f64> = g.iter().map(|v| v / n).collect();
        let p = predict_dy(&a, &PatchSource::new(site, unit, 1.0)).unwrap();
        assert!((p - n).abs() < 1e-12);
        // Orthogonal direction.
        let mut o = vec![g[1], -g[0], 0.0, 0.0, 0.0];
        o.iter_mut().for_each(|v| *v /= n);
        assert!(predict_dy(&a, &PatchSource::new(site, o, 1.0)).unwrap().abs() < 1e-15);
        assert!(predict_dy(&a, &PatchSource::new(Site::new(3, 0), vec![0.0; 5], 1.0)).is_err());
    }

    #[test]
    fn interval_support_sums_layers() {
        let a = field(2);
        let j = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let p = predict_dy(&a, &PatchSource::new(Site::new(0, 1), j, 2.0).through(2)).unwrap();
        let want = 2.0 * (a.at(0, 1)[0] + a.at(1, 1)[0] + a.at(2, 1)[0]);
        assert!((p - want).abs() < 1e-12);
    }

    #[test]
    fn error_rules() {
        let s = prediction_errors(&[(0.5, 0.5), (0.0, 1e-3)], EPS0);
        assert_eq!(s.records[0].e_abs, 0.0);
        assert_eq!(s.records[0].e_rel, 0.0);
        assert!(s.records[1].low_signal);
        assert_eq!(s.median_e_rel, Some(0.0));
        assert_eq!(Regime::classify(1.0, 0.05, EPS0), Regime::Good);
        assert_eq!(Regime::classify(1.0, 0.3, EPS0), Regime::Mixed);
        assert_eq!(Regime::classify(1.0, 0.7, EPS0), Regime::Nonlinear);
        assert_eq!(Regime::classify(5e-8, 100.0, EPS0), Regime::LowSignal);
        assert_eq!(s.regime_counts, [1, 0, 1, 0]);
    }

    proptest! {
        #[test]
        fn bilinear(e1 in -2.0..2.0f64, e2 in -2.0..2.0f64, seed in 0u64..1000) {
            let a = field(seed);
            let mut r = RngStream::new(seed + 1);
            let j: Vec<f64> = (0..5).map(|_| r.next_normal()).collect();
            let k: Vec<f64> = (0..5).map(|_| r.next_normal()).collect();
            let site = Site::new(2, 3);
            let p = |v: &[f64], e: f64| predict_dy(&a, &PatchSource::new(site, v.to_vec(), e)).unwrap();
            let sum: Vec<f64> = j.iter().zip(&k).map(|(x, y)| x + y).collect();
            prop_assert!((p(&j, e1 + e2) - p(&j, e1) - p(&j, e2)).abs() < 1e-12);
            prop_assert!((p(&sum, e1) - p(&j, e1) - p(&k, e1)).abs() < 1e-12);
        }
    }
}
