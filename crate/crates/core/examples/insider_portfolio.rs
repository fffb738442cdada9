//! Optimal insider portfolio for log utility with constant `b0`, `sigma0`:
//! the computed fraction against `b0/sigma0^2 + (z - B(t)) / (sigma0 (T0 - t))`,
//! and the value gained over the Merton fraction.

use insider_volterra::chaos::{simulate_signal, ChaosSpec};
use insider_volterra::donsker::{DonskerField, QuadratureSpec};
use insider_volterra::models::insider_fraction_exact;
use insider_volterra::paths::{sample_driver, LevyModel, TimeGrid};
use insider_volterra::portfolio::{solve_portfolio, MarketSpec, PortfolioOptions, Utility};
use insider_volterra::stats::linspace;

fn main() -> insider_volterra::Result<()> {
    let (b0, sigma0, t0) = (0.2, 1.0, 1.0);
    let grid = TimeGrid::new(0.5, t0, 32)?;
    let levy = LevyModel::none();
    let paths = sample_driver(&grid, &levy, 4_000, 8)?;
    let spec = ChaosSpec::brownian(t0)?;
    let signal = simulate_signal(&spec, &paths, &grid)?;
    let field = DonskerField::new(spec, levy, signal, grid.clone(), QuadratureSpec::default())?;
    let market = MarketSpec::constant(b0, sigma0, 1.0, Utility::Log)?;

    let z_nodes = linspace(-2.0, 2.0, 9);
    let run = solve_portfolio(&market, &field, &paths, &grid, &z_nodes, &PortfolioOptions::default())?;
    println!("J(insider) = {:.4}, J(Merton) = {:.4}, gain {:.4} +- {:.4}", run.insider_value.mean, run.merton_value.mean, run.gain.mean, run.gain.std_err);

    let node = &run.nodes[4];
    let pf = node.portfolio(&market, &grid)?;
    println!("z = {}, c = {:.4}; scenario 0:", node.z, node.c);
    let b = paths.brownian_path(0);
    for k in (0..grid.n_steps()).step_by(8) {
        let exact = insider_fraction_exact(b0, sigma0, t0, grid.t(k), node.z, b[k]);
        println!("  t = {:.3}: pi_hat = {:8.4}, exact = {:8.4}", grid.t(k), pf.diagonal[k][0], exact);
    }
    Ok(())
}
