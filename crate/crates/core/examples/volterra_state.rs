//! Forward Euler solution of a Volterra state equation with a decaying
//! kernel, and the variational process against a finite difference.

use insider_volterra::models;
use insider_volterra::paths::{sample_driver, LevyModel, TimeGrid};
use insider_volterra::stats::Estimate;
use insider_volterra::svie::{solve_forward, solve_variational, Constant};

fn main() -> insider_volterra::Result<()> {
    let grid = TimeGrid::new(1.0, 1.5, 64)?;
    let paths = sample_driver(&grid, &LevyModel::none(), 5_000, 3)?;
    let m = models::time_dependent();
    let u = Constant(0.3);
    let dir = Constant(1.0);

    let x = solve_forward(&m.coeffs, &u, 0.0, &paths, &grid, None)?;
    let chi = solve_variational(&m.coeffs, &dir, &x, &paths, &grid, None)?;
    let a = 1e-4;
    let up = solve_forward(&m.coeffs, &Constant(0.3 + a), 0.0, &paths, &grid, None)?;
    let dn = solve_forward(&m.coeffs, &Constant(0.3 - a), 0.0, &paths, &grid, None)?;
    let fd: Vec<f64> = up.terminal().iter().zip(dn.terminal()).map(|(p, q)| (p - q) / (2.0 * a)).collect();

    let xt = Estimate::from_samples(&x.terminal());
    println!("E[X(T)]      = {:.5} +- {:.5}", xt.mean, xt.std_err);
    println!("E[chi(T)]    = {:.6}", Estimate::from_samples(&chi.terminal()).mean);
    println!("E[dX(T)/du]  = {:.6} (central difference)", Estimate::from_samples(&fd).mean);
    Ok(())
}
