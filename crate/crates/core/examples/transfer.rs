// SPDX-License-Identifier: MIT OR Apache-2.0

//! Response fingerprints, the intertwiner between a model and its depth
//! refinement, and the resulting site map.

use rftlab::numeric::RngStream;
use rftlab::transfer::{all_sites, estimate_intertwiner, refine_depth, response_fingerprints, ProbeSet};
use rftlab::{Model, ModelConfig};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let probes = ProbeSet::spread(tokens.len(), model.width(), &mut RngStream::new(0).child_named("probes"))?;
    let refined = refine_depth(&model, 2)?;
    println!("{} probes; refined model has {} layers", probes.len(), refined.n_layers());

    let coarse = response_fingerprints(&model, &tokens, &all_sites(model.n_layers(), tokens.len()), &probes, 32)?;
    let fine = response_fingerprints(&refined, &tokens, &all_sites(refined.n_layers(), tokens.len()), &probes, 32)?;
    let map = estimate_intertwiner(&coarse, &fine, 0.3, 1e-8)?;
    let mut within = 0;
    for (src, t) in map.sources.iter().zip(&map.mapping) {
        match t {
            Some((dst, w)) => {
                within += usize::from((dst.layer as i64 - 2 * src.layer as i64).abs() <= 1);
                if src.token == 3 {
                    println!("{src} -> {dst} (weight {w:.3})");
                }
            }
            None => println!("{src} unmapped"),
        }
    }
    println!("{within}/{} sources land within one layer of 2l", map.mapped());
    Ok(())
}
