//! The insider signal `Z(t) = ∫₀ᵗ β dB + ∫₀ᵗ∫ ψ dÑ` for `t ≤ T₀`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::paths::{DriverPaths, Horizon, LevyModel, TimeGrid};
use crate::{Error, Result};

/// Salt separating the signal-extension stream from the grid stream.
const EXTENSION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type MarkFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Deterministic integrands `β(t)` and `ψ(t, ζ)` and the horizon `T₀`.
#[derive(Clone)]
pub struct ChaosSpec {
    beta: ScalarFn,
    psi: MarkFn,
    horizon: f64,
    psi_vanishes: bool,
}

impl fmt::Debug for ChaosSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChaosSpec")
            .field("horizon", &self.horizon)
            .field("psi_vanishes", &self.psi_vanishes)
            .finish_non_exhaustive()
    }
}

const PROBES: usize = 257;

impl ChaosSpec {
    /// Validates `β ≠ 0` on a probe grid of `[0, T₀]`.
    pub fn new(
        beta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        psi: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::param("T0", format!("must be positive, got {horizon}")));
        }
        let probes: Vec<f64> = (0..PROBES).map(|i| horizon * i as f64 / (PROBES - 1) as f64).collect();
        for &t in &probes {
            let b = beta(t);
            if !b.is_finite() || b.abs() < 1e-12 {
                return Err(Error::param("beta", format!("must be non-zero on [0, T0], beta({t}) = {b}")));
            }
        }
        // ψ is only ever probed at mark sizes; a vanishing test over a symmetric
        // range of sizes catches the identically-zero case.
        let psi_vanishes = probes
            .iter()
            .all(|&t| [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0].iter().all(|&z| psi(t, z) == 0.0));
        Ok(ChaosSpec { beta: Arc::new(beta), psi: Arc::new(psi), horizon, psi_vanishes })
    }

    /// `Z = B(T₀)`.
    pub fn brownian(horizon: f64) -> Result<Self> {
        Self::new(|_| 1.0, |_, _| 0.0, horizon)
    }

    pub fn beta(&self, t: f64) -> f64 {
        (self.beta)(t)
    }

    pub fn psi(&self, t: f64, zeta: f64) -> f64 {
        (self.psi)(t, zeta)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// True when the signal has no jump component under `levy`, so the
    /// conditional law of `Z` is Gaussian.
    pub fn is_gaussian(&self, levy: &LevyModel) -> bool {
        !levy.is_active()
            || (self.psi_vanishes
                && levy.marks().iter().all(|m| {
                    (0..PROBES).all(|i| self.psi(self.horizon * i as f64 / (PROBES - 1) as f64, m.size) == 0.0)
                }))
    }

    /// `(∫_t^{T₀} β² ds, ∫_t^{T₀}∫ ψ² ν(dζ) ds)` by the trapezoid rule on the
    /// lattice `{m·h}`.
    pub fn remaining_variance(&self, levy: &LevyModel, t: f64, h: f64) -> Result<(f64, f64)> {
        if t > self.horizon * (1.0 + 1e-12) || t < 0.0 {
            return Err(Error::param("t", format!("{t} outside [0, T0 = {}]", self.horizon)));
        }
        let vb = integrate_lattice(|s| Complex64::new(self.beta(s).powi(2), 0.0), t, self.horizon, h).re;
        let vn = if levy.is_active() {
            integrate_lattice(|s| Complex64::new(levy.integrate(|z| self.psi(s, z).powi(2)), 0.0), t, self.horizon, h).re
        } else {
            0.0
        };
        Ok((vb, vn))
    }

    /// Jump exponent `∫_t^{T₀}∫ (e^{ixψ} − 1 − ixψ) ν(dζ) ds`.
    pub fn jump_exponent(&self, levy: &LevyModel, t: f64, x: f64, h: f64) -> Complex64 {
        if !levy.is_active() {
            return Complex64::new(0.0, 0.0);
        }
        integrate_lattice(
            |s| {
                levy.marks()
                    .iter()
                    .map(|m| {
                        let th = x * self.psi(s, m.size);
                        let w = levy.intensity() * m.prob;
                        Complex64::new(w * (th.cos() - 1.0), w * (th.sin() - th))
                    })
                    .sum()
            },
            t,
            self.horizon,
            h,
        )
    }
}

/// Trapezoid rule on `[a, b]` split at the lattice points `m·h`.
pub(crate) fn integrate_lattice(f: impl Fn(f64) -> Complex64, a: f64, b: f64, h: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    if b <= a {
        return acc;
    }
    let mut knots = vec![a];
    let mut m = (a / h).floor() as i64 + 1;
    loop {
        let x = m as f64 * h;
        if x >= b - 1e-12 * h {
            break;
        }
        if x > a + 1e-12 * h {
            knots.push(x);
        }
        m += 1;
    }
    knots.push(b);
    let mut f_prev = f(knots[0]);
    for w in knots.windows(2) {
        let f_next = f(w[1]);
        acc += (f_prev + f_next) * (0.5 * (w[1] - w[0]));
        f_prev = f_next;
    }
    acc
}

/// Simulated signal `Z(t_k)` per scenario plus the terminal value `Z(T₀)`.
#[derive(Debug, Clone)]
pub struct SignalPaths {
    n_scenarios: usize,
    n_points: usize,
    values: Vec<f64>,
    terminal: Vec<f64>,
}

impl SignalPaths {
    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    /// `Z(t_k)` for scenario `s`; frozen at `Z(T₀)` past the horizon.
    pub fn value(&self, s: usize, k: usize) -> f64 {
        self.values[s * self.n_points + k]
    }

    pub fn path(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_points..(s + 1) * self.n_points]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    /// `Z(t_k)` across scenarios.
    pub fn slice(&self, k: usize) -> Vec<f64> {
        (0..self.n_scenarios).map(|s| self.value(s, k)).collect()
    }
}

/// Left-point Itô sums for the Brownian part, exact jump times for the
/// Poisson part. When `T₀ > T` the noise is extended to `T₀` from a
/// separate reproducible stream.
pub fn simulate_signal(spec: &ChaosSpec, paths: &DriverPaths, grid: &TimeGrid) -> Result<SignalPaths> {
    let n_points = grid.n_points();
    let levy = paths.levy();
    let stop = match grid.horizon() {
        Horizon::OnGrid { index, .. } => index,
        Horizon::BeyondGrid => grid.n_steps(),
    };
    let comp: Vec<f64> = (0..grid.n_steps())
        .map(|k| grid.dt() * levy.integrate(|z| spec.psi(grid.t(k), z)))
        .collect();
    let per: Vec<(Vec<f64>, f64)> = (0..paths.n_scenarios())
        .into_par_iter()
        .map(|s| {
            let inc = paths.increments(s);
            let jumps = paths.jumps(s);
            let mut z = Vec::with_capacity(n_points);
            let mut acc = 0.0;
            z.push(acc);
            let mut ji = 0;
            for k in 0..grid.n_steps() {
                if k < stop {
                    acc += spec.beta(grid.t(k)) * inc[k] - comp[k];
                    while ji < jumps.len() && jumps[ji].step == k {
                        acc += spec.psi(jumps[ji].time, jumps[ji].size);
                        ji += 1;
                    }
                }
                z.push(acc);
            }
            let terminal = match grid.horizon() {
                Horizon::OnGrid { .. } => acc,
                Horizon::BeyondGrid => acc + extension(spec, levy, grid, paths.seed(), s as u64),
            };
            (z, terminal)
        })
        .collect();
    let mut values = Vec::with_capacity(paths.n_scenarios() * n_points);
    let mut terminal = Vec::with_capacity(paths.n_scenarios());
    for (z, t) in per {
        values.extend(z);
        terminal.push(t);
    }
    Ok(SignalPaths { n_scenarios: paths.n_scenarios(), n_points, values, terminal })
}

/// `Z(T₀) − Z(T)` from fresh noise on `(T, T₀]` at the grid step.
fn extension(spec: &ChaosSpec, levy: &LevyModel, grid: &TimeGrid, seed: u64, stream: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EXTENSION_SALT);
    rng.set_stream(stream);
    let mut t = grid.t_max();
    let mut acc = 0.0;
    while t < spec.horizon() - 1e-12 {
        let h = grid.dt().min(spec.horizon() - t);
        let n: f64 = rng.sample(StandardNormal);
        acc += spec.beta(t) * h.sqrt() * n;
        if levy.is_active() {
            acc -= h * levy.integrate(|z| spec.psi(t, z));
            let count = Poisson::new(levy.intensity() * h).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
            for _ in 0..count {
                let tau = t + h * (1.0 - rng.random::<f64>());
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let mut size = levy.marks().last().map(|m| m.size).unwrap_or(0.0);
                for m in levy.marks() {
                    cum += m.prob;
                    if u < cum {
                        size = m.size;
                        break;
                    }
                }
                acc += spec.psi(tau, size);
            }
        }
        t += h;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::sample_driver;

    #[test]
    fn rejects_zero_beta() {
        assert!(ChaosSpec::new(|_| 0.0, |_, _| 0.0, 1.0).is_err());
        assert!(ChaosSpec::new(|t| t - 0.5, |_, _| 0.0, 1.0).is_err());
    }

    #[test]
    fn remaining_variance_edges() {
        let spec = ChaosSpec::brownian(1.0).unwrap();
        let l = LevyModel::none();
        assert_eq!(spec.remaining_variance(&l, 1.0, 1.0 / 64.0).unwrap(), (0.0, 0.0));
        let (vb, vn) = spec.remaining_variance(&l, 0.0, 1.0 / 64.0).unwrap();
        assert!((vb - 1.0).abs() < 1e-14 && vn == 0.0);
        assert!(spec.remaining_variance(&l, 1.5, 0.1).is_err());
    }

    #[test]
    fn remaining_variance_quadratic_beta() {
        // exact ∫₀¹ s² ds = 1/3
        let spec = ChaosSpec::new(|s| s + 1e-3, |_, _| 0.0, 1.0).unwrap();
        let exact = ((1.0f64 + 1e-3).powi(3) - 1e-9) / 3.0;
        let (vb, _) = spec.remaining_variance(&LevyModel::none(), 0.0, 1.0 / 64.0).unwrap();
        assert!((vb - exact).abs() < 1e-3);
    }

    #[test]
    fn jump_variance_profile() {
        let spec = ChaosSpec::new(|_| 1.0, |_, z| 0.5 * z, 1.0).unwrap();
        let l = LevyModel::single(2.0, 1.0).unwrap();
        let (_, vn) = spec.remaining_variance(&l, 0.25, 1.0 / 64.0).unwrap();
        assert!((vn - 2.0 * 0.25 * 0.75).abs() < 1e-12);
        assert!(!spec.is_gaussian(&l));
        assert!(spec.is_gaussian(&LevyModel::none()));
    }

    #[test]
    fn lattice_pieces_off_grid() {
        let v = integrate_lattice(|_| Complex64::new(1.0, 0.0), 0.13, 0.91, 0.25);
        assert!((v.re - 0.78).abs() < 1e-14);
    }

    #[test]
    fn unit_beta_signal_is_brownian() {
        let grid = TimeGrid::new(1.0, 1.0, 16).unwrap();
        let paths = sample_driver(&grid, &LevyModel::none(), 20, 4).unwrap();
        let sig = simulate_signal(&ChaosSpec::brownian(1.0).unwrap(), &paths, &grid).unwrap();
        for s in 0..20 {
            let b = paths.brownian_path(s);
            for k in 0..=16 {
                assert!((sig.value(s, k) - b[k]).abs() < 1e-14);
            }
            assert_eq!(sig.terminal()[s], b[16]);
        }
    }

    #[test]
    fn signal_extends_past_grid() {
        let grid = TimeGrid::new(0.5, 1.0, 32).unwrap();
        let paths = sample_driver(&grid, &LevyModel::none(), 4000, 11).unwrap();
        let sig = simulate_signal(&ChaosSpec::brownian(1.0).unwrap(), &paths, &grid).unwrap();
        let ext: Vec<f64> = (0..4000).map(|s| sig.terminal()[s] - sig.value(s, 32)).collect();
        let var = crate::stats::variance(&ext);
        assert!((var - 0.5).abs() < 0.05, "extension variance {var}");
        let again = simulate_signal(&ChaosSpec::brownian(1.0).unwrap(), &paths, &grid).unwrap();
        assert_eq!(sig.terminal(), again.terminal());
    }
}
