// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch one site, inspect the downstream response field, then average
//! responses over every source site by (layer offset, token offset).

use rftlab::intervention::{relative_response_map, CleanRun, PatchSource};
use rftlab::numeric::{norm, RngStream};
use rftlab::transfer::all_sites;
use rftlab::{Model, ModelConfig, Site};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let mut rng = RngStream::new(0);
    let dir = rng.unit_vector(model.width());

    let clean = CleanRun::new(&model, &tokens)?;
    let site = Site::new(1, 3);
    let eps = 0.01 * norm(clean.residuals().site(site));
    let dr = clean.response_field(&PatchSource::new(site, dir.clone(), eps))?;
    println!("||dR|| after patching {site} with eps = {eps:.3e}:");
    for l in 0..dr.layers() {
        let row: Vec<String> = (0..dr.tokens()).map(|x| format!("{:8.1e}", norm(dr.at(l, x)))).collect();
        println!("  layer {l}: {}", row.join(" "));
    }

    let sources = all_sites(model.n_layers() - 1, tokens.len());
    let map = relative_response_map(&model, &tokens, &sources, &dir, eps)?;
    println!("mean response by offset (d_layer, d_token):");
    for (dl, dx, mean, count) in map.rows().into_iter().filter(|r| r.1 <= 3) {
        println!("  ({dl}, {dx})  {mean:.3e}  n={count}");
    }
    let marginal: Vec<String> = map.token_marginal().iter().map(|v| format!("{v:.2e}")).collect();
    println!("token marginal: {}", marginal.join(" "));
    Ok(())
}
