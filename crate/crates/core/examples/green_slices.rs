// SPDX-License-Identifier: MIT OR Apache-2.0

//! Component Green slices between site pairs, built by forward and by
//! reverse probes, and their energy concentration.

use rftlab::autodiff::Linearization;
use rftlab::metrics::green::green_slice_with;
use rftlab::metrics::{slice_concentration, GreenMethod};
use rftlab::{Model, ModelConfig, Site};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let lin = Linearization::new(&model, &tokens)?;
    let pairs = [
        (Site::new(1, 3), Site::new(2, 3)),
        (Site::new(1, 3), Site::new(2, 6)),
        (Site::new(0, 0), Site::new(4, 7)),
        (Site::new(2, 5), Site::new(3, 1)),
    ];
    for (s, t) in pairs {
        let g = green_slice_with(&lin, s, t, GreenMethod::Jvp)?;
        let h = green_slice_with(&lin, s, t, GreenMethod::Vjp)?;
        let diff = g.matrix.iter().zip(&h.matrix).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let (d, o) = g.diagonal_dominance();
        let c = slice_concentration(&g);
        println!(
            "{s} -> {t}: causal {}, ||G||_F {:.3e}, |diag| {d:.2e} vs |offdiag| {o:.2e}, entries for 50/90/99% {}/{}/{}, jvp-vjp {diff:.1e}",
            g.causal,
            g.frobenius(),
            c.entries_50,
            c.entries_90,
            c.entries_99
        );
    }
    Ok(())
}
