//! Brownian plus compensated-Poisson driver: moments against their exact
//! values, and coarsening onto a grid with half the steps.

use insider_volterra::paths::{sample_driver, LevyModel, Mark, TimeGrid};
use insider_volterra::stats::Estimate;

fn main() -> insider_volterra::Result<()> {
    let grid = TimeGrid::new(1.0, 1.5, 64)?;
    let levy = LevyModel::new(3.0, vec![Mark { size: -0.4, prob: 0.5 }, Mark { size: 0.6, prob: 0.5 }])?;
    let paths = sample_driver(&grid, &levy, 20_000, 1)?;

    let b_t: Vec<f64> = (0..paths.n_scenarios()).map(|s| paths.brownian_path(s)[grid.n_steps()]).collect();
    let b2: Vec<f64> = b_t.iter().map(|b| b * b).collect();
    let jumps: Vec<f64> = (0..paths.n_scenarios()).map(|s| paths.jumps(s).len() as f64).collect();
    let e = Estimate::from_samples(&b2);
    println!("E[B(T)^2]   = {:.4} +- {:.4} (exact {})", e.mean, e.std_err, grid.t_max());
    let e = Estimate::from_samples(&jumps);
    println!("E[#jumps]   = {:.4} +- {:.4} (exact {})", e.mean, e.std_err, levy.intensity() * grid.t_max());

    let coarse = paths.coarsen(2)?;
    let same = (0..coarse.n_scenarios()).all(|s| {
        let a = coarse.increments(s).iter().sum::<f64>();
        let b = paths.increments(s).iter().sum::<f64>();
        (a - b).abs() < 1e-12
    });
    println!("coarsened to {} steps, endpoints preserved: {same}", coarse.n_steps());
    Ok(())
}
