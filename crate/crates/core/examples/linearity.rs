// SPDX-License-Identifier: MIT OR Apache-2.0

//! Amplitude sweep at one site: slope fit, nonlinearity and superposition
//! errors, and how well the gradient predicts each patch.

use rftlab::autodiff::sensitivity_field;
use rftlab::intervention::{CleanRun, PatchSource};
use rftlab::metrics::{predict_dy, prediction_errors, superposition_sweep, SlopeBand};
use rftlab::numeric::{norm, RngStream, EPS0};
use rftlab::{Model, ModelConfig, Observable, Site};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let obs = Observable::new(11, 42);
    let site = Site::new(2, 5);
    let mut rng = RngStream::new(3);
    let (j1, j2) = (rng.unit_vector(model.width()), rng.unit_vector(model.width()));

    let clean = CleanRun::new(&model, &tokens)?;
    let r = norm(clean.residuals().site(site));
    let grid: Vec<f64> = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5].iter().flat_map(|f| [-f * r, f * r]).collect();
    let rep = superposition_sweep(&model, &tokens, site, &j1, &j2, &grid, SlopeBand::default(), &obs)?;
    println!("slope {:.5e} from {} band points", rep.slope, rep.band_points);
    let sup = rep.eta_sup.clone().unwrap_or_default();
    for (i, e) in rep.epsilons.iter().enumerate() {
        println!(
            "  eps/||R|| {:+.3}  dy {:+.4e}  eta_nl {:>9}  eta_sup {:.2e}",
            e / r,
            rep.dy[i],
            rep.eta_nl[i].map_or("-".into(), |v| format!("{v:.2e}")),
            sup[i]
        );
    }

    let a = sensitivity_field(&model, &tokens, &obs)?;
    let mut pairs = Vec::new();
    for l in 0..model.n_layers() {
        for x in 0..tokens.len() {
            let s = Site::new(l, x);
            let p = PatchSource::new(s, rng.unit_vector(model.width()), 0.01 * norm(clean.residuals().site(s)));
            pairs.push((clean.measure_dy(&p, &obs)?, predict_dy(&a, &p)?));
        }
    }
    let s = prediction_errors(&pairs, EPS0);
    println!(
        "gradient prediction over {} patches: median E_rel {:.2e}, q90 {:.2e}, regimes good/mixed/low/nonlinear {:?}",
        pairs.len(),
        s.median_e_rel.unwrap_or(f64::NAN),
        s.q90_e_rel.unwrap_or(f64::NAN),
        s.regime_counts
    );
    Ok(())
}
