// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composition test: propagate a patch directly, or hand its field off at a
//! middle layer and propagate from there.

use rftlab::intervention::{composition_test, CompositionMode};
use rftlab::numeric::RngStream;
use rftlab::{Model, ModelConfig, Site};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let j = RngStream::new(1).unit_vector(model.width());
    let eps = [0.2, 0.1, 0.05, 0.025, 0.0125];
    for mode in [CompositionMode::Linearized, CompositionMode::Measured] {
        let rep = composition_test(&model, &tokens, Site::new(0, 2), &j, 2, &eps, mode)?;
        println!("{mode:?}:");
        for (i, (e, eta)) in rep.epsilons.iter().zip(&rep.eta_comp).enumerate() {
            let ratio = if i > 0 && mode == CompositionMode::Linearized { format!("  ratio {:.3}", eta / rep.eta_comp[i - 1]) } else { String::new() };
            println!("  eps {e:<7} eta_comp {eta:.3e}{ratio}");
        }
    }
    Ok(())
}
