// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inverse patch inference: the smallest source that moves a logit
//! difference by a target amount, and a sparse fit of a planted residual
//! shift.

use rftlab::autodiff::sensitivity_field;
use rftlab::inference::{
    probe_atoms, sensitivity_atoms, solve_residual_target, solve_scalar_target, validate_solution, AdmissibleSet,
    ResidualSolverConfig, TargetField, ValidationTarget,
};
use rftlab::transfer::all_sites;
use rftlab::{Model, ModelConfig, Observable, Site};

fn main() -> rftlab::Result<()> {
    let model = Model::init(ModelConfig::small(0))?;
    let tokens = [4, 19, 33, 7, 51, 12, 28, 60];
    let obs = Observable::new(11, 42);
    let a = sensitivity_field(&model, &tokens, &obs)?;
    let sites: Vec<Site> = all_sites(model.n_layers() - 1, tokens.len());

    for k in [1, 3, sites.len()] {
        let target = 0.05;
        let sol = solve_scalar_target(&a, &AdmissibleSet::new(sites.clone()).with_sparsity(k), target)?;
        let v = validate_solution(&model, &tokens, &sol, &ValidationTarget::Scalar { obs, target })?;
        println!(
            "k = {k:>2}: {} sites from {}, ||J|| {:.3e}, achieved dy {:.5} for target {target} (rel. error {:.1e})",
            sol.support().len(),
            sol.support()[0],
            sol.source_norm(),
            v.achieved,
            v.relative_error
        );
    }

    let atoms = sensitivity_atoms(&a, &sites);
    let slices: Vec<Site> = (0..tokens.len()).map(|x| Site::new(model.n_layers(), x)).collect();
    let columns = probe_atoms(&model, &tokens, &atoms, &slices)?;
    let planted = [(3usize, 0.02), (17, -0.01)];
    let mut values = vec![0.0; columns[0].len()];
    for &(i, c) in &planted {
        values.iter_mut().zip(&columns[i]).for_each(|(v, col)| *v += c * col);
    }
    let target = TargetField { slices, values };
    let cfg = ResidualSolverConfig { lambda_rel: 0.0, sparsity: Some(2) };
    let sol = solve_residual_target(&atoms, &columns, &target, cfg)?;
    for &(i, c) in &planted {
        println!("atom {i} at {}: planted {c:+.4}, recovered {:+.6}", atoms[i].site, sol.coefficients[i]);
    }
    let v = validate_solution(&model, &tokens, &sol, &ValidationTarget::Field(target))?;
    println!("true patch reaches the target field with relative error {:.2e}", v.relative_error);
    Ok(())
}
