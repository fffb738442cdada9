//! Adjoint BSDE by regression for a model whose coefficients ignore the
//! state: then `p(t, z) = c M(t, z)` exactly.

use insider_volterra::adjoint::AdjointOptions;
use insider_volterra::chaos::{simulate_signal, ChaosSpec};
use insider_volterra::donsker::{DonskerField, QuadratureSpec};
use insider_volterra::maxprin::Problem;
use insider_volterra::models;
use insider_volterra::paths::{sample_driver, LevyModel, TimeGrid};
use insider_volterra::stats::relative_rmse;
use insider_volterra::svie::Constant;

fn main() -> insider_volterra::Result<()> {
    let grid = TimeGrid::new(1.0, 1.5, 32)?;
    let levy = LevyModel::none();
    let paths = sample_driver(&grid, &levy, 4_000, 4)?;
    let spec = ChaosSpec::brownian(1.5)?;
    let signal = simulate_signal(&spec, &paths, &grid)?;
    let field = DonskerField::new(spec, levy, signal, grid.clone(), QuadratureSpec::default())?;

    let c = 2.0;
    let m = models::x_free(c);
    let prob = Problem { coeffs: &m.coeffs, perf: &m.perf, field: &field, paths: &paths, grid: &grid, control_set: m.control_set };
    for z in [-1.0, 0.0, 1.0] {
        let (_, table, adj) = prob.adjoint(&Constant(0.5), z, &AdjointOptions::default())?;
        let (mut est, mut exact) = (Vec::new(), Vec::new());
        for k in 0..=grid.n_steps() {
            for s in 0..paths.n_scenarios() {
                est.push(adj.p(s, k));
                exact.push(c * table.m(s, k));
            }
        }
        println!("z = {z:4.1}: relative RMSE of p against c M = {:.4}", relative_rmse(&est, &exact));
    }
    Ok(())
}
