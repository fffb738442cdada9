//! Forward stochastic Volterra equation
//!
//! ```text
//! X(t) = ξ(t) + ∫₀ᵗ b(t,s,X,u) ds + ∫₀ᵗ σ(t,s,X,u) dB(s) + ∫₀ᵗ∫ γ(t,s,X,u,ζ) Ñ(ds,dζ)
//! ```
//!
//! solved per `z` by an Euler scheme that re-evaluates the whole history at
//! every `t_k`, plus its variational (Gâteaux-derivative) equation.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::paths::{DriverPaths, TimeGrid};
use crate::{Error, Result};

/// Central-difference step `1e-5 (1 + |arg|)`.
pub fn fd_step(arg: f64) -> f64 {
    1e-5 * (1.0 + arg.abs())
}

fn central(f: impl Fn(f64) -> f64, arg: f64) -> f64 {
    let h = fd_step(arg);
    (f(arg + h) - f(arg - h)) / (2.0 * h)
}

/// Coefficients `ξ, b, σ, γ` of the controlled Volterra equation.
///
/// Partial derivatives default to central differences; implementors with
/// closed forms should override them.
pub trait VolterraCoefficients: Sync {
    fn xi(&self, t: f64, z: f64) -> f64;
    fn b(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64;
    fn sigma(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64;
    fn gamma(&self, _t: f64, _s: f64, _x: f64, _u: f64, _z: f64, _zeta: f64) -> f64 {
        0.0
    }

    fn db_dx(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        central(|v| self.b(t, s, v, u, z), x)
    }
    fn db_du(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        central(|v| self.b(t, s, x, v, z), u)
    }
    fn dsigma_dx(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        central(|v| self.sigma(t, s, v, u, z), x)
    }
    fn dsigma_du(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        central(|v| self.sigma(t, s, x, v, z), u)
    }
    fn dgamma_dx(&self, t: f64, s: f64, x: f64, u: f64, z: f64, zeta: f64) -> f64 {
        central(|v| self.gamma(t, s, v, u, z, zeta), x)
    }
    fn dgamma_du(&self, t: f64, s: f64, x: f64, u: f64, z: f64, zeta: f64) -> f64 {
        central(|v| self.gamma(t, s, x, v, z, zeta), u)
    }
}

pub type KernelFn = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type JumpKernelFn = Arc<dyn Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync>;

/// Coefficients assembled from closures.
#[derive(Clone)]
pub struct FnCoefficients {
    xi: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    b: KernelFn,
    sigma: KernelFn,
    gamma: Option<JumpKernelFn>,
}

impl std::fmt::Debug for FnCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnCoefficients").field("jumps", &self.gamma.is_some()).finish_non_exhaustive()
    }
}

impl FnCoefficients {
    pub fn new(
        xi: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        b: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnCoefficients { xi: Arc::new(xi), b: Arc::new(b), sigma: Arc::new(sigma), gamma: None }
    }

    pub fn with_gamma(mut self, gamma: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.gamma = Some(Arc::new(gamma));
        self
    }
}

impl VolterraCoefficients for FnCoefficients {
    fn xi(&self, t: f64, z: f64) -> f64 {
        (self.xi)(t, z)
    }
    fn b(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        (self.b)(t, s, x, u, z)
    }
    fn sigma(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        (self.sigma)(t, s, x, u, z)
    }
    fn gamma(&self, t: f64, s: f64, x: f64, u: f64, z: f64, zeta: f64) -> f64 {
        self.gamma.as_ref().map_or(0.0, |g| g(t, s, x, u, z, zeta))
    }
}

/// What a control may look at when choosing `u(t_k)`: everything known at
/// `t_k` on its own scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub k: usize,
    pub t: f64,
    pub z: f64,
    pub scenario: usize,
    /// Current state `X(t_k, z)`.
    pub x: f64,
    /// `B(t_k)`.
    pub b: f64,
    /// `Z(t_k)` when a signal is attached.
    pub signal: Option<f64>,
}

/// An adapted control `u(t, z)`.
pub trait Control: Sync {
    fn value(&self, obs: &Observation) -> f64;
}

/// `u ≡ c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl Control for Constant {
    fn value(&self, _: &Observation) -> f64 {
        self.0
    }
}

/// Control given by a closure of the observation.
pub struct FnControl<F>(pub F);

impl<F: Fn(&Observation) -> f64 + Sync> Control for FnControl<F> {
    fn value(&self, obs: &Observation) -> f64 {
        (self.0)(obs)
    }
}

/// Piecewise constant in time: `values[i]` on `[breaks[i], breaks[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl Control for PiecewiseConstant {
    fn value(&self, obs: &Observation) -> f64 {
        let i = self.breaks.iter().rposition(|&b| obs.t >= b - 1e-12).unwrap_or(0);
        self.values[i.min(self.values.len() - 1)]
    }
}

/// Values recorded per scenario and step, `[s][k]` with `n_steps` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    pub n_steps: usize,
    pub values: Vec<f64>,
}

impl Control for Tabulated {
    fn value(&self, obs: &Observation) -> f64 {
        self.values[obs.scenario * self.n_steps + obs.k]
    }
}

/// `u + a β` for a base control `u` and direction `β`.
pub struct Perturbed<'a> {
    pub base: &'a dyn Control,
    pub direction: &'a dyn Control,
    pub a: f64,
}

impl Control for Perturbed<'_> {
    fn value(&self, obs: &Observation) -> f64 {
        self.base.value(obs) + self.a * self.direction.value(obs)
    }
}

/// Closed control set `𝕌 = [lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControlSet {
    pub lo: f64,
    pub hi: f64,
}

impl ControlSet {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::param("control_set", format!("empty interval [{lo}, {hi}]")));
        }
        Ok(ControlSet { lo, hi })
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo - 1e-12 && u <= self.hi + 1e-12
    }

    pub fn grid(&self, n: usize) -> Vec<f64> {
        crate::stats::linspace(self.lo, self.hi, n)
    }
}

impl Default for ControlSet {
    fn default() -> Self {
        ControlSet { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }
}

/// `X(t_k, z)` and the applied control per scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub z: f64,
    n_scenarios: usize,
    n_points: usize,
    /// `[s][k]`, `k = 0..=N`.
    x: Vec<f64>,
    /// `[s][k]`, `k = 0..N` (left-point controls).
    u: Vec<f64>,
}

impl StateField {
    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn x(&self, s: usize, k: usize) -> f64 {
        self.x[s * self.n_points + k]
    }

    pub fn u(&self, s: usize, k: usize) -> f64 {
        self.u[s * (self.n_points - 1) + k]
    }

    pub fn path(&self, s: usize) -> &[f64] {
        &self.x[s * self.n_points..(s + 1) * self.n_points]
    }

    /// `X(t_k)` across scenarios.
    pub fn slice(&self, k: usize) -> Vec<f64> {
        (0..self.n_scenarios).map(|s| self.x(s, k)).collect()
    }

    pub fn control_slice(&self, k: usize) -> Vec<f64> {
        (0..self.n_scenarios).map(|s| self.u(s, k)).collect()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.slice(self.n_points - 1)
    }

    /// The applied control as a replayable table.
    pub fn tabulated_control(&self) -> Tabulated {
        Tabulated { n_steps: self.n_points - 1, values: self.u.clone() }
    }

    pub fn min(&self) -> f64 {
        self.x.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// CSV `(scenario, t, z, X)`.
    pub fn write_csv(&self, out: &mut impl Write, grid: &TimeGrid, scenarios: &[usize], config_hash: &str) -> Result<()> {
        writeln!(out, "# config-hash: {config_hash}")?;
        writeln!(out, "scenario,t,z,X")?;
        for &s in scenarios {
            for k in 0..self.n_points {
                writeln!(out, "{s},{},{},{:e}", grid.t(k), self.z, self.x(s, k))?;
            }
        }
        Ok(())
    }
}

/// Signal values handed to controls, `Z(t_k)` per scenario.
pub type SignalView<'a> = Option<&'a crate::chaos::SignalPaths>;

fn check_paths(paths: &DriverPaths, grid: &TimeGrid) -> Result<()> {
    if paths.n_steps() != grid.n_steps() || (paths.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::param("paths", "driver paths were sampled on a different grid"));
    }
    Ok(())
}

/// Euler scheme on the integral form with full history re-evaluation.
///
/// Stochastic sums use left points; a jump in `(t_j, t_{j+1}]` contributes
/// `γ(t_k, t_j, X_j, u_j, ζ)` to every `t_k > t_j`, compensated with the
/// same left-point integrand.
pub fn solve_forward(
    coeffs: &dyn VolterraCoefficients,
    control: &dyn Control,
    z: f64,
    paths: &DriverPaths,
    grid: &TimeGrid,
    signal: SignalView<'_>,
) -> Result<StateField> {
    check_paths(paths, grid)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let levy = paths.levy().clone();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..paths.n_scenarios())
        .into_par_iter()
        .map(|s| {
            let inc = paths.increments(s);
            let jumps = paths.jumps(s);
            let mut x = Vec::with_capacity(n + 1);
            let mut u = Vec::with_capacity(n);
            let mut bm = 0.0;
            x.push(coeffs.xi(0.0, z));
            for k in 0..n {
                let obs = Observation {
                    k,
                    t: grid.t(k),
                    z,
                    scenario: s,
                    x: x[k],
                    b: bm,
                    signal: signal.map(|sig| sig.value(s, k)),
                };
                u.push(control.value(&obs));
                bm += inc[k];
                let tk = grid.t(k + 1);
                let mut acc = coeffs.xi(tk, z);
                for j in 0..=k {
                    let tj = grid.t(j);
                    acc += coeffs.b(tk, tj, x[j], u[j], z) * dt + coeffs.sigma(tk, tj, x[j], u[j], z) * inc[j];
                    if levy.is_active() {
                        acc -= dt * levy.integrate(|zeta| coeffs.gamma(tk, tj, x[j], u[j], z, zeta));
                    }
                }
                for jp in jumps.iter().take_while(|jp| jp.step <= k) {
                    acc += coeffs.gamma(tk, grid.t(jp.step), x[jp.step], u[jp.step], z, jp.size);
                }
                if !acc.is_finite() {
                    return Err(Error::BlowUp { step: k + 1, scenario: s });
                }
                x.push(acc);
            }
            Ok((x, u))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = StateField { z, n_scenarios: paths.n_scenarios(), n_points: n + 1, x: Vec::new(), u: Vec::new() };
    for (x, u) in rows {
        state.x.extend(x);
        state.u.extend(u);
    }
    Ok(state)
}

/// Euler scheme for the derivative process `χ = d/da X^{u+aβ}|_{a=0}`.
///
/// The scheme is the exact linearization of [`solve_forward`], so it equals
/// the derivative of the discrete map up to the accuracy of the partials.
/// `direction` is evaluated along the base path.
pub fn solve_variational(
    coeffs: &dyn VolterraCoefficients,
    direction: &dyn Control,
    base: &StateField,
    paths: &DriverPaths,
    grid: &TimeGrid,
    signal: SignalView<'_>,
) -> Result<StateField> {
    check_paths(paths, grid)?;
    if base.n_scenarios != paths.n_scenarios() || base.n_points != grid.n_points() {
        return Err(Error::param("base_state", "does not match the driver paths"));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let z = base.z;
    let levy = paths.levy().clone();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..paths.n_scenarios())
        .into_par_iter()
        .map(|s| {
            let inc = paths.increments(s);
            let jumps = paths.jumps(s);
            let xb = base.path(s);
            let mut chi = vec![0.0; n + 1];
            let mut beta = Vec::with_capacity(n);
            let mut bm = 0.0;
            for k in 0..n {
                let obs = Observation {
                    k,
                    t: grid.t(k),
                    z,
                    scenario: s,
                    x: xb[k],
                    b: bm,
                    signal: signal.map(|sig| sig.value(s, k)),
                };
                beta.push(direction.value(&obs));
                bm += inc[k];
                let tk = grid.t(k + 1);
                let mut acc = 0.0;
                for j in 0..=k {
                    let (tj, xj, uj) = (grid.t(j), xb[j], base.u(s, j));
                    acc += (coeffs.db_dx(tk, tj, xj, uj, z) * chi[j] + coeffs.db_du(tk, tj, xj, uj, z) * beta[j]) * dt;
                    acc += (coeffs.dsigma_dx(tk, tj, xj, uj, z) * chi[j] + coeffs.dsigma_du(tk, tj, xj, uj, z) * beta[j])
                        * inc[j];
                    if levy.is_active() {
                        acc -= dt
                            * levy.integrate(|zeta| {
                                coeffs.dgamma_dx(tk, tj, xj, uj, z, zeta) * chi[j]
                                    + coeffs.dgamma_du(tk, tj, xj, uj, z, zeta) * beta[j]
                            });
                    }
                }
                for jp in jumps.iter().take_while(|jp| jp.step <= k) {
                    let (tj, xj, uj) = (grid.t(jp.step), xb[jp.step], base.u(s, jp.step));
                    acc += coeffs.dgamma_dx(tk, tj, xj, uj, z, jp.size) * chi[jp.step]
                        + coeffs.dgamma_du(tk, tj, xj, uj, z, jp.size) * beta[jp.step];
                }
                if !acc.is_finite() {
                    return Err(Error::BlowUp { step: k + 1, scenario: s });
                }
                chi[k + 1] = acc;
            }
            Ok((chi, beta))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = StateField { z, n_scenarios: paths.n_scenarios(), n_points: n + 1, x: Vec::new(), u: Vec::new() };
    for (x, u) in rows {
        state.x.extend(x);
        state.u.extend(u);
    }
    Ok(state)
}

/// True when `b`, `σ`, `γ` ignore `x` on a few probe points.
pub fn is_x_free(coeffs: &dyn VolterraCoefficients, z: f64, zetas: &[f64]) -> bool {
    let probes = [(0.3, 0.1, 0.2), (0.9, 0.5, -0.4), (0.5, 0.0, 1.3)];
    probes.iter().all(|&(t, s, u)| {
        [(-1.3, 0.7), (0.2, 2.9)].iter().all(|&(x1, x2)| {
            coeffs.b(t, s, x1, u, z) == coeffs.b(t, s, x2, u, z)
                && coeffs.sigma(t, s, x1, u, z) == coeffs.sigma(t, s, x2, u, z)
                && zetas.iter().all(|&zeta| coeffs.gamma(t, s, x1, u, z, zeta) == coeffs.gamma(t, s, x2, u, z, zeta))
        })
    })
}

/// True when the kernels depend on their first (observation-time) argument.
pub fn has_time_dependent_kernels(coeffs: &dyn VolterraCoefficients, z: f64, zetas: &[f64]) -> bool {
    let probes = [(0.1, 0.7, 0.9, 0.3), (0.0, -0.4, 0.35, 1.2), (0.05, 1.5, 0.6, -0.8)];
    probes.iter().any(|&(s, x, t, u)| {
        let t2 = t + 0.37;
        coeffs.b(t, s, x, u, z) != coeffs.b(t2, s, x, u, z)
            || coeffs.sigma(t, s, x, u, z) != coeffs.sigma(t2, s, x, u, z)
            || zetas.iter().any(|&zeta| coeffs.gamma(t, s, x, u, z, zeta) != coeffs.gamma(t2, s, x, u, z, zeta))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_driver, LevyModel};

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 1.0, 16).unwrap()
    }

    #[test]
    fn zero_coefficients_follow_xi() {
        let g = grid();
        let p = sample_driver(&g, &LevyModel::single(2.0, 1.0).unwrap(), 5, 1).unwrap();
        let c = FnCoefficients::new(|t, _| 1.0 + t, |_, _, _, _, _| 0.0, |_, _, _, _, _| 0.0);
        let st = solve_forward(&c, &Constant(0.3), 0.0, &p, &g, None).unwrap();
        for s in 0..5 {
            for k in 0..=16 {
                assert_eq!(st.x(s, k), 1.0 + g.t(k));
            }
        }
    }

    #[test]
    fn constant_coefficients_are_brownian_motion() {
        let g = grid();
        let p = sample_driver(&g, &LevyModel::none(), 3, 2).unwrap();
        let c = FnCoefficients::new(|_, _| 0.0, |_, _, _, _, _| 0.5, |_, _, _, _, _| 2.0);
        let st = solve_forward(&c, &Constant(0.0), 0.0, &p, &g, None).unwrap();
        let b = p.brownian_path(1);
        for k in 0..=16 {
            assert!((st.x(1, k) - (0.5 * g.t(k) + 2.0 * b[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn jumps_enter_after_their_step() {
        let g = grid();
        let l = LevyModel::single(3.0, 1.0).unwrap();
        let p = sample_driver(&g, &l, 20, 7).unwrap();
        let c = FnCoefficients::new(|_, _| 0.0, |_, _, _, _, _| 0.0, |_, _, _, _, _| 0.0)
            .with_gamma(|_, _, _, _, _, zeta| zeta);
        let st = solve_forward(&c, &Constant(0.0), 0.0, &p, &g, None).unwrap();
        for s in 0..20 {
            for k in 0..=16 {
                let count = p.jumps(s).iter().filter(|j| j.step < k).count() as f64;
                assert!((st.x(s, k) - (count - 3.0 * g.t(k))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_direction_gives_zero_derivative() {
        let g = grid();
        let p = sample_driver(&g, &LevyModel::none(), 4, 3).unwrap();
        let c = FnCoefficients::new(|_, _| 1.0, |_, _, x, u, _| -x + u, |_, _, x, u, _| 0.2 * x * u);
        let base = solve_forward(&c, &Constant(0.5), 0.0, &p, &g, None).unwrap();
        let chi = solve_variational(&c, &Constant(0.0), &base, &p, &g, None).unwrap();
        assert!((0..4).all(|s| chi.path(s).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn blow_up_is_reported() {
        let g = grid();
        let p = sample_driver(&g, &LevyModel::none(), 2, 3).unwrap();
        let c = FnCoefficients::new(|_, _| 1.0, |_, _, x, _, _| x.powi(8) * 1e300, |_, _, _, _, _| 0.0);
        assert!(matches!(solve_forward(&c, &Constant(0.0), 0.0, &p, &g, None), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn probes_classify_models() {
        let xfree = FnCoefficients::new(|_, _| 0.0, |t, _, _, u, _| t * u, |_, _, _, u, _| u);
        assert!(is_x_free(&xfree, 0.0, &[]));
        assert!(has_time_dependent_kernels(&xfree, 0.0, &[]));
        let lin = FnCoefficients::new(|_, _| 0.0, |_, _, x, u, _| x * u, |_, _, _, _, _| 1.0);
        assert!(!is_x_free(&lin, 0.0, &[]));
        assert!(!has_time_dependent_kernels(&lin, 0.0, &[]));
    }

    #[test]
    fn piecewise_control_lookup() {
        let c = PiecewiseConstant { breaks: vec![0.0, 0.5], values: vec![1.0, -1.0] };
        let mut o = Observation { k: 0, t: 0.2, z: 0.0, scenario: 0, x: 0.0, b: 0.0, signal: None };
        assert_eq!(c.value(&o), 1.0);
        o.t = 0.5;
        assert_eq!(c.value(&o), -1.0);
    }
}
