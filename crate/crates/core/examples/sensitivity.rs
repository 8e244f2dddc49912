// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sensitivity field of a logit difference, ranked sites, and a
//! finite-difference spot check.

use rftlab::autodiff::{fd_patch_derivative, sensitivity_field};
use rftlab::metrics::site_scores;
use rftlab::{Model, ModelConfig, Observable};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let obs = Observable::new(11, 42);

    let a = sensitivity_field(&model, &tokens, &obs)?;
    let scores = site_scores(&a);
    println!("top sites by ||a||:");
    for (site, s) in scores.top_k(5) {
        println!("  {site}  {s:.4e}");
    }
    let marginal: Vec<String> = scores.layer_marginal().iter().map(|v| format!("{v:.3e}")).collect();
    println!("layer marginal: {}", marginal.join(" "));
    println!("sites for 90% of the energy: {}", scores.sites_for_coverage(0.9));

    let (site, _) = scores.top_k(1)[0];
    let g = a.site(site);
    for i in 0..3 {
        let mut e = vec![0.0; model.width()];
        e[i] = 1.0;
        let fd = fd_patch_derivative(&model, &tokens, site, &e, &obs, 1e-5)?;
        println!("{site} component {i}: gradient {:+.8e}  central difference {fd:+.8e}", g[i]);
    }
    Ok(())
}
