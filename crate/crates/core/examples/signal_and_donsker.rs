//! The insider signal and its conditional density `M(t, z)`: closed form
//! against Fourier quadrature, the trace `Φ = M_B / M`, and a jump chaos.

use insider_volterra::chaos::{simulate_signal, ChaosSpec};
use insider_volterra::donsker::{DonskerField, QuadratureSpec};
use insider_volterra::paths::{sample_driver, LevyModel, Mark, TimeGrid};
use insider_volterra::stats::{linspace, trapezoid};

fn main() -> insider_volterra::Result<()> {
    let grid = TimeGrid::new(0.9, 1.0, 9)?;
    let levy = LevyModel::none();
    let paths = sample_driver(&grid, &levy, 3, 2)?;
    let spec = ChaosSpec::brownian(1.0)?;
    let signal = simulate_signal(&spec, &paths, &grid)?;
    let field = DonskerField::new(spec, levy, signal, grid.clone(), QuadratureSpec::default())?;

    println!("   t     Z(t)   M(t,0.5) closed  quadrature   Phi(t,0.5)");
    for k in 0..grid.n_points() {
        println!(
            "{:4.1} {:8.4} {:15.8} {:11.8} {:12.5}",
            grid.t(k),
            field.signal().value(0, k),
            field.density_closed_form(k, 0.5, 0)?,
            field.density_quadrature(k, 0.5, 0)?,
            field.phi_ratio(k, 0.5, 0)?
        );
    }

    // Z = 0.8 B(1) + sum of jump sizes, so M has no closed form.
    let levy = LevyModel::new(2.0, vec![Mark { size: -0.5, prob: 0.4 }, Mark { size: 0.3, prob: 0.6 }])?;
    let paths = sample_driver(&grid, &levy, 3, 2)?;
    let spec = ChaosSpec::new(|_| 0.8, |_, zeta| zeta, 1.0)?;
    let signal = simulate_signal(&spec, &paths, &grid)?;
    let field = DonskerField::new(spec, levy, signal, grid, QuadratureSpec::default())?;
    let k = 5;
    let (vb, vn) = field.remaining_variance(k);
    let sd = (vb + vn).sqrt();
    let c = field.signal().value(0, k);
    let zs = linspace(c - 8.0 * sd, c + 8.0 * sd, 400);
    let m = zs.iter().map(|&z| field.conditional_density(k, z, 0)).collect::<insider_volterra::Result<Vec<_>>>()?;
    println!("jump chaos at t = 0.5: V_B = {vb:.3}, V_N = {vn:.3}, mass = {:.6}", trapezoid(&m, zs[1] - zs[0]));
    Ok(())
}
