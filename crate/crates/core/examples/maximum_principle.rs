//! Brute-force search over constant controls of the LQ model, then the
//! first-order condition at the winner and at a displaced control.

use insider_volterra::chaos::{simulate_signal, ChaosSpec};
use insider_volterra::donsker::{DonskerField, QuadratureSpec};
use insider_volterra::maxprin::{CheckOptions, Problem};
use insider_volterra::models;
use insider_volterra::paths::{sample_driver, LevyModel, TimeGrid};
use insider_volterra::svie::Constant;

fn main() -> insider_volterra::Result<()> {
    let grid = TimeGrid::new(1.0, 1.5, 32)?;
    let levy = LevyModel::none();
    let paths = sample_driver(&grid, &levy, 4_000, 6)?;
    let spec = ChaosSpec::brownian(1.5)?;
    let signal = simulate_signal(&spec, &paths, &grid)?;
    let field = DonskerField::new(spec, levy, signal, grid.clone(), QuadratureSpec::default())?;

    let m = models::lq();
    let prob = Problem { coeffs: &m.coeffs, perf: &m.perf, field: &field, paths: &paths, grid: &grid, control_set: m.control_set };
    let us = m.control_set.grid(21);
    let bf = prob.brute_force_optimize(&models::constant_family(&m.control_set, 21), 0.0)?;
    let best = us[bf.argmax];
    println!("brute force: u* = {best} (analytic {}), j = {:.4}", models::LQ_OPTIMUM, bf.values[bf.argmax].mean);

    let opts = CheckOptions::default();
    for u in [best, best + 0.8] {
        let r = prob.check_necessary(&Constant(u), 0.0, &opts)?;
        println!("u = {u:.2}: max |E[dH/du | G_t]| = {:.2e}, passed = {}", r.max_abs_foc, r.passed);
    }
    let r = prob.check_sufficient(&Constant(best), 0.0, &opts)?;
    println!("sufficient at u*: passed = {}, concavity = {:?}", r.passed, r.concavity);
    Ok(())
}
