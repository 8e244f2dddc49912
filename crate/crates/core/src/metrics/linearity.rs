// SPDX-License-Identifier: MIT OR Apache-2.0

//! Amplitude sweeps: nonlinearity `eta_nl` and superposition error `eta_sup`.
//!
//! ```text
//! eta_nl(eps)  = |dy(eps) - eps * slope| / |eps * slope|
//! eta_sup(eps) = |dy[eps (J1 + J2)] - dy[eps J1] - dy[eps J2]|
//!                / max(|dy[eps J1]| + |dy[eps J2]|, eps0)
//! ```
//!
//! The slope is a least-squares fit through the origin over a near-zero
//! amplitude band that excludes `eps = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Site;
use crate::intervention::{CleanRun, PatchSource};
use crate::model::{Model, Observable};
use crate::numeric::{norm, EPS0};

/// Default perturbative-band threshold on `eta_nl` and `eta_sup`.
pub const DEFAULT_TAU: f64 = 0.2;

/// Amplitudes used for the slope fit, as fractions of the largest `|eps|` in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeBand {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SlopeBand {
    fn default() -> Self {
        Self { lo: 0.02, hi: 0.10 }
    }
}

impl SlopeBand {
    /// Absolute `[lo, hi]` limits for a grid.
    pub fn limits(&self, grid: &[f64]) -> (f64, f64) {
        let max = grid.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        (self.lo * max, self.hi * max)
    }

    fn contains(&self, limits: (f64, f64), eps: f64) -> bool {
        eps != 0.0 && eps.abs() >= limits.0 * (1.0 - 1e-12) && eps.abs() <= limits.1 * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub site: Site,
    pub epsilons: Vec<f64>,
    /// `dy` for the swept direction (`J1 + J2` in a superposition sweep).
    pub dy: Vec<f64>,
    /// Norm of the swept direction.
    pub direction_norm: f64,
    pub band_limits: (f64, f64),
    pub band_points: usize,
    pub slope: f64,
    /// `None` where the slope or `eps` is too small to divide by.
    pub eta_nl: Vec<Option<f64>>,
    pub slope_degenerate: bool,
    pub eta_sup: Option<Vec<f64>>,
    pub tau: f64,
}

impl LinearityReport {
    /// Slope-predicted `dy` at each amplitude.
    pub fn dy_pred(&self) -> Vec<f64> {
        self.epsilons.iter().map(|e| e * self.slope).collect()
    }

    /// Whether each amplitude lies inside the perturbative band.
    pub fn in_band(&self) -> Vec<bool> {
        (0..self.epsilons.len())
            .map(|i| {
                let nl = self.eta_nl[i].map_or(self.epsilons[i] == 0.0, |v| v < self.tau);
                let sup = self.eta_sup.as_ref().map_or(true, |s| s[i] < self.tau);
                nl && sup
            })
            .collect()
    }
}

/// Least-squares slope through the origin over the band.
pub fn fit_slope(epsilons: &[f64], dy: &[f64], band: SlopeBand) -> Result<(f64, usize)> {
    let limits = band.limits(epsilons);
    let (mut sxy, mut sxx, mut count) = (0.0, 0.0, 0);
    for (&e, &y) in epsilons.iter().zip(dy) {
        if band.contains(limits, e) {
            sxy += e * y;
            sxx += e * e;
            count += 1;
        }
    }
    if count < 2 {
        return Err(Error::Config(format!(
            "slope band [{:.3e}, {:.3e}] holds {count} amplitudes, need at least 2",
            limits.0, limits.1
        )));
    }
    Ok((sxy / sxx, count))
}

pub fn eta_nl(dy: f64, eps: f64, slope: f64) -> Option<f64> {
    let pred = eps * slope;
    (pred.abs() > EPS0 * EPS0).then(|| (dy - pred).abs() / pred.abs())
}

pub fn eta_sup(dy_sum: f64, dy1: f64, dy2: f64, eps0: f64) -> f64 {
    (dy_sum - dy1 - dy2).abs() / (dy1.abs() + dy2.abs()).max(eps0)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config("amplitude grid must be nonempty and finite".into()));
    }
    Ok(())
}

fn sweep(clean: &CleanRun, site: Site, dirs: &[&[f64]], grid: &[f64], obs: &Observable) -> Result<Vec<f64>> {
    let y0 = clean.y(obs)?;
    grid.iter()
        .map(|&eps| {
            let patches: Vec<PatchSource> = dirs.iter().map(|d| PatchSource::new(site, d.to_vec(), eps)).collect();
            Ok(clean.model().observe(&clean.patch(&patches)?.residuals, obs)? - y0)
        })
        .collect()
}

fn report(site: Site, grid: &[f64], dy: Vec<f64>, direction_norm: f64, band: SlopeBand) -> Result<LinearityReport> {
    let (slope, band_points) = fit_slope(grid, &dy, band)?;
    let slope_degenerate = slope.abs() <= EPS0;
    let eta = grid
        .iter()
        .zip(&dy)
        .map(|(&e, &y)| if slope_degenerate { None } else { eta_nl(y, e, slope) })
        .collect();
    Ok(LinearityReport {
        site,
        epsilons: grid.to_vec(),
        dy,
        direction_norm,
        band_limits: band.limits(grid),
        band_points,
        slope,
        eta_nl: eta,
        slope_degenerate,
        eta_sup: None,
        tau: DEFAULT_TAU,
    })
}

/// `linearity_sweep`: `dy(eps)` along `direction` plus the fitted slope and `eta_nl`.
pub fn linearity_sweep(
    model: &Model,
    tokens: &[usize],
    site: Site,
    direction: &[f64],
    grid: &[f64],
    band: SlopeBand,
    obs: &Observable,
) -> Result<LinearityReport> {
    check_grid(grid)?;
    let clean = CleanRun::new(model, tokens)?;
    let dy = sweep(&clean, site, &[direction], grid, obs)?;
    report(site, grid, dy, norm(direction), band)
}

/// `superposition_sweep`: sweeps `J1 + J2` (not renormalized) and records
/// `eta_sup` against the separate responses.
pub fn superposition_sweep(
    model: &Model,
    tokens: &[usize],
    site: Site,
    j1: &[f64],
    j2: &[f64],
    grid: &[f64],
    band: SlopeBand,
    obs: &Observable,
) -> Result<LinearityReport> {
    check_grid(grid)?;
    for j in [j1, j2] {
        let n = norm(j);
        if n != 0.0 && (n - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("superposition directions must be unit or zero, got norm {n}")));
        }
    }
    let clean = CleanRun::new(model, tokens)?;
    let sum: Vec<f64> = j1.iter().zip(j2).map(|(a, b)| a + b).collect();
    let dy_sum = sweep(&clean, site, &[&sum], grid, obs)?;
    let dy1 = sweep(&clean, site, &[j1], grid, obs)?;
    let dy2 = sweep(&clean, site, &[j2], grid, obs)?;
    let sup = (0..grid.len()).map(|i| eta_sup(dy_sum[i], dy1[i], dy2[i], EPS0)).collect();
    let mut out = report(site, grid, dy_sum, norm(&sum), band)?;
    out.eta_sup = Some(sup);
    Ok(out)
}
