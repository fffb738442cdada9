//! Maximum-principle checks and a brute-force oracle for the
//! `z`-parameterized control problem
//!
//! ```text
//! j(u)(z) = E[∫₀ᵀ f(t, X, u, z) M(t, z) dt + g(X(T), z) M(T, z)],   J(u) = ∫ j(u)(z) dz.
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{solve_adjoint_bsde, AdjointOptions, AdjointPoint, AdjointSolution, Features, HamiltonianModel, PerformanceSpec};
use crate::donsker::{DonskerTable, InformationField};
use crate::paths::{DriverPaths, TimeGrid};
use crate::regression::{Basis, Projector};
use crate::stats::{rms, Estimate};
use crate::svie::{solve_forward, solve_variational, Control, ControlSet, Perturbed, StateField, VolterraCoefficients};
use crate::{Error, Result};

/// Everything that defines one control problem on fixed noise.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub coeffs: &'a dyn VolterraCoefficients,
    pub perf: &'a dyn PerformanceSpec,
    pub field: &'a dyn InformationField,
    pub paths: &'a DriverPaths,
    pub grid: &'a TimeGrid,
    pub control_set: ControlSet,
}

/// `j(z)` per node with standard errors and the `z`-quadrature `J`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceReport {
    pub z_nodes: Vec<f64>,
    pub j_of_z: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// Trapezoid weights with `J = Σ w_z j(z)`.
    pub weights: Vec<f64>,
    #[serde(rename = "J")]
    pub total: f64,
}

/// Both routes to `d/da j(u + aβ)(z)` at `a = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxReport {
    pub variational: Estimate,
    pub finite_difference: Estimate,
    /// `E[Σ_k ∂H/∂u β Δt]`, when the adjoint was solved.
    pub hamiltonian: Option<Estimate>,
    /// Standard error of the paired difference of the first two routes.
    pub difference_std_err: f64,
    pub tolerance: f64,
    pub agree: bool,
    /// `K = sup |β|` over scenarios and grid times.
    pub direction_bound: f64,
    /// Whether `u ± aβ` stays in `𝕌` everywhere.
    pub admissible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcavityFlags {
    pub terminal: bool,
    pub hamiltonian: bool,
    pub terminal_chords: usize,
    pub hamiltonian_chords: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub z: f64,
    pub times: Vec<f64>,
    /// RMS over scenarios of `E[∂H/∂u | G_t]` at each grid time.
    pub foc: Vec<f64>,
    pub max_abs_foc: f64,
    /// RMS of `∂²H/∂u²` along the candidate.
    pub curvature: f64,
    pub threshold: f64,
    pub passed: bool,
    pub concavity: Option<ConcavityFlags>,
    /// Largest RMS gap `max_w E[H(w)|G_t] − E[H(û)|G_t]` over grid times.
    pub maximum_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceResult {
    pub values: Vec<Estimate>,
    pub argmax: usize,
    pub runner_up_gap: f64,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub tol: f64,
    pub adjoint: AdjointOptions,
    /// Statistics generating `G_t`; thinning them gives a sub-filtration.
    pub filtration: Features,
    /// Points of the `𝕌` grid in the maximum-condition search.
    pub control_grid: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { tol: 1e-2, adjoint: AdjointOptions::default(), filtration: Features::default(), control_grid: 21 }
    }
}

impl<'a> Problem<'a> {
    fn table(&self, z: f64) -> Result<DonskerTable> {
        self.field.table(z, self.paths.n_scenarios(), self.grid.n_points())
    }

    pub fn state(&self, control: &dyn Control, z: f64) -> Result<StateField> {
        solve_forward(self.coeffs, control, z, self.paths, self.grid, self.field.signal_paths())
    }

    fn samples(&self, state: &StateField, table: &DonskerTable) -> Vec<f64> {
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let z = state.z;
        (0..state.n_scenarios())
            .into_par_iter()
            .map(|s| {
                let running: f64 = (0..n)
                    .map(|k| self.perf.f(self.grid.t(k), state.x(s, k), state.u(s, k), z) * table.m(s, k))
                    .sum::<f64>()
                    * dt;
                running + self.perf.g(state.x(s, n), z) * table.m(s, n)
            })
            .collect()
    }

    /// Per-scenario contributions to `j(u)(z)`.
    pub fn j_samples(&self, control: &dyn Control, z: f64) -> Result<Vec<f64>> {
        let table = self.table(z)?;
        let state = self.state(control, z)?;
        Ok(self.samples(&state, &table))
    }

    pub fn j(&self, control: &dyn Control, z: f64) -> Result<Estimate> {
        Ok(Estimate::from_samples(&self.j_samples(control, z)?))
    }

    /// Monte Carlo `j(z)` per node, `J` by the trapezoid rule over the nodes.
    pub fn performance(&self, control: &dyn Control, z_nodes: &[f64]) -> Result<PerformanceReport> {
        let est = z_nodes.iter().map(|&z| self.j(control, z)).collect::<Result<Vec<_>>>()?;
        let weights = trapezoid_weights(z_nodes);
        let total = est.iter().zip(&weights).map(|(e, w)| e.mean * w).sum();
        Ok(PerformanceReport {
            z_nodes: z_nodes.to_vec(),
            j_of_z: est.iter().map(|e| e.mean).collect(),
            standard_errors: est.iter().map(|e| e.std_err).collect(),
            weights,
            total,
        })
    }

    /// Variational route, central finite differences at step `a`, and
    /// (when `adjoint` is given) the Hamiltonian route.
    pub fn gateaux_derivative(
        &self,
        control: &dyn Control,
        direction: &dyn Control,
        z: f64,
        a: f64,
        adjoint: Option<&AdjointOptions>,
    ) -> Result<GateauxReport> {
        let table = self.table(z)?;
        let signal = self.field.signal_paths();
        let base = self.state(control, z)?;
        let chi = solve_variational(self.coeffs, direction, &base, self.paths, self.grid, signal)?;
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let var: Vec<f64> = (0..base.n_scenarios())
            .into_par_iter()
            .map(|s| {
                let running: f64 = (0..n)
                    .map(|k| {
                        let (t, x, u) = (self.grid.t(k), base.x(s, k), base.u(s, k));
                        (self.perf.df_dx(t, x, u, z) * chi.x(s, k) + self.perf.df_du(t, x, u, z) * chi.u(s, k))
                            * table.m(s, k)
                    })
                    .sum::<f64>()
                    * dt;
                running + self.perf.dg_dx(base.x(s, n), z) * chi.x(s, n) * table.m(s, n)
            })
            .collect();
        // Replay the base control and direction as fixed processes so the
        // perturbation does not feed back through the state.
        let u_tab = base.tabulated_control();
        let b_tab = chi.tabulated_control();
        let plus = solve_forward(self.coeffs, &Perturbed { base: &u_tab, direction: &b_tab, a }, z, self.paths, self.grid, signal)?;
        let minus =
            solve_forward(self.coeffs, &Perturbed { base: &u_tab, direction: &b_tab, a: -a }, z, self.paths, self.grid, signal)?;
        let jp = self.samples(&plus, &table);
        let jm = self.samples(&minus, &table);
        let fd: Vec<f64> = jp.iter().zip(&jm).map(|(p, m)| (p - m) / (2.0 * a)).collect();
        let hamiltonian = match adjoint {
            Some(opts) => {
                let adj = solve_adjoint_bsde(self.coeffs, self.perf, &base, &table, signal, self.paths, self.grid, opts)?;
                let h: Vec<f64> = (0..base.n_scenarios())
                    .map(|s| (0..n).map(|k| adj.dh_du_slice(k)[s] * chi.u(s, k)).sum::<f64>() * dt)
                    .collect();
                Some(Estimate::from_samples(&h))
            }
            None => None,
        };
        let diff: Vec<f64> = var.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let d = Estimate::from_samples(&diff);
        let tolerance = f64::max(1e-2, 3.0 * d.std_err);
        let mut direction_bound: f64 = 0.0;
        let mut admissible = true;
        for s in 0..base.n_scenarios() {
            for k in 0..n {
                let (u, b) = (base.u(s, k), chi.u(s, k));
                direction_bound = direction_bound.max(b.abs());
                admissible &= self.control_set.contains(u + a * b) && self.control_set.contains(u - a * b);
            }
        }
        Ok(GateauxReport {
            variational: Estimate::from_samples(&var),
            finite_difference: Estimate::from_samples(&fd),
            hamiltonian,
            difference_std_err: d.std_err,
            tolerance,
            agree: d.mean.abs() <= tolerance,
            direction_bound,
            admissible,
        })
    }

    /// State, density table and adjoint at a candidate control.
    pub fn adjoint(&self, control: &dyn Control, z: f64, opts: &AdjointOptions) -> Result<(StateField, DonskerTable, AdjointSolution)> {
        let table = self.table(z)?;
        let state = self.state(control, z)?;
        let adj =
            solve_adjoint_bsde(self.coeffs, self.perf, &state, &table, self.field.signal_paths(), self.paths, self.grid, opts)?;
        Ok((state, table, adj))
    }

    fn g_projector(&self, k: usize, state: &StateField, table: &DonskerTable, opts: &CheckOptions) -> Result<Projector> {
        let brownian = opts.filtration.brownian.then(|| crate::adjoint::brownian_columns(self.paths));
        let basis: Basis = crate::adjoint::step_basis(
            k,
            state,
            table,
            self.field.signal_paths(),
            brownian.as_deref(),
            opts.filtration,
            &opts.adjoint.regression,
        );
        Projector::new(&basis, &[], &opts.adjoint.regression)
    }

    /// `E[∂H/∂u | G_t] = 0` along the grid, with tolerance scaled by the
    /// `u`-curvature of `H`.
    pub fn check_necessary(&self, control: &dyn Control, z: f64, opts: &CheckOptions) -> Result<OptimalityReport> {
        let (state, table, adj) = self.adjoint(control, z, &opts.adjoint)?;
        let n = self.grid.n_steps();
        let foc = (0..n)
            .map(|k| {
                let proj = self.g_projector(k, &state, &table, opts)?;
                Ok(rms(&proj.conditional(adj.dh_du_slice(k))?))
            })
            .collect::<Result<Vec<f64>>>()?;
        let curv: Vec<f64> = (0..n).flat_map(|k| adj.d2h_du2_slice(k).to_vec()).collect();
        let curvature = rms(&curv);
        let threshold = opts.tol * curvature.max(1.0);
        let max_abs_foc = foc.iter().cloned().fold(0.0, f64::max);
        Ok(OptimalityReport {
            z,
            times: (0..n).map(|k| self.grid.t(k)).collect(),
            foc,
            max_abs_foc,
            curvature,
            threshold,
            passed: max_abs_foc < threshold,
            concavity: None,
            maximum_gap: None,
        })
    }

    /// Concavity probes of `g` and `H`, and the maximum condition over a
    /// grid of `𝕌`, on top of the first-order profile.
    pub fn check_sufficient(&self, control: &dyn Control, z: f64, opts: &CheckOptions) -> Result<OptimalityReport> {
        let mut report = self.check_necessary(control, z, opts)?;
        let (state, table, adj) = self.adjoint(control, z, &opts.adjoint)?;
        let n = self.grid.n_steps();
        let model = HamiltonianModel { coeffs: self.coeffs, perf: self.perf, levy: self.paths.levy(), grid: self.grid, z };

        let mut xt = state.terminal();
        xt.sort_by(f64::total_cmp);
        let q = |f: f64| xt[((xt.len() - 1) as f64 * f).round() as usize];
        let chords = [(q(0.05), q(0.5)), (q(0.1), q(0.9)), (q(0.25), q(0.75)), (q(0.5), q(0.95))];
        let terminal = chords.iter().all(|&(a, b)| {
            let (a, b) = if (b - a).abs() < 1e-9 { (a - 0.5, a + 0.5) } else { (a, b) };
            concave_chord(|x| self.perf.g(x, z), a, b)
        });

        let stride = (n / 8).max(1);
        let ns = state.n_scenarios();
        let samples: Vec<(usize, usize)> = (0..n).step_by(stride).flat_map(|k| (0..4).map(move |i| (k, i * 7919 % ns))).collect();
        let mut h_chords = 0;
        let mut h_concave = true;
        for &(k, s) in &samples {
            let r: Vec<f64> = (0..adj.n_marks()).map(|i| adj.r(s, k, i)).collect();
            let at = AdjointPoint { k, m: table.m(s, k), p: adj.p(s, k), q: adj.q(s, k), r: &r, future: None };
            let (x, u) = (state.x(s, k), state.u(s, k));
            let dx = 0.1 * (1.0 + x.abs());
            let du = 0.1 * (1.0 + u.abs());
            for (ex, eu) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)] {
                h_chords += 1;
                let hv = |t: f64| {
                    let (a, b) = model.h(&at, x + t * ex * dx, u + t * eu * du);
                    a + b
                };
                h_concave &= concave_chord(hv, -1.0, 1.0);
            }
        }

        let maximum_gap = if self.control_set.lo.is_finite() && self.control_set.hi.is_finite() {
            let ws = self.control_set.grid(opts.control_grid);
            let mut worst: f64 = 0.0;
            for k in 0..n {
                let proj = self.g_projector(k, &state, &table, opts)?;
                let at_u = |s: usize, u: f64| {
                    let r: Vec<f64> = (0..adj.n_marks()).map(|i| adj.r(s, k, i)).collect();
                    let at = AdjointPoint { k, m: table.m(s, k), p: adj.p(s, k), q: adj.q(s, k), r: &r, future: None };
                    let (a, b) = model.h(&at, state.x(s, k), u);
                    a + b
                };
                let ns = state.n_scenarios();
                let base: Vec<f64> = (0..ns).map(|s| at_u(s, state.u(s, k))).collect();
                let base_fit = proj.conditional(&base)?;
                let mut best = base_fit.clone();
                for &w in &ws {
                    let hw: Vec<f64> = (0..ns).map(|s| at_u(s, w)).collect();
                    for (b, v) in best.iter_mut().zip(proj.conditional(&hw)?) {
                        *b = b.max(v);
                    }
                }
                let gaps: Vec<f64> = best.iter().zip(&base_fit).map(|(b, a)| b - a).collect();
                worst = worst.max(rms(&gaps));
            }
            Some(worst)
        } else {
            None
        };
        report.concavity = Some(ConcavityFlags {
            terminal,
            hamiltonian: h_concave,
            terminal_chords: chords.len(),
            hamiltonian_chords: h_chords,
        });
        report.passed = report.passed && terminal && h_concave && maximum_gap.is_none_or(|g| g <= report.threshold);
        report.maximum_gap = maximum_gap;
        Ok(report)
    }

    /// Exhaustive evaluation of `j(z)` over a finite family with common
    /// random numbers.
    pub fn brute_force_optimize(&self, family: &[Box<dyn Control + Send>], z: f64) -> Result<BruteForceResult> {
        if family.is_empty() {
            return Err(Error::param("family", "empty control family"));
        }
        let table = self.table(z)?;
        let values = family
            .par_iter()
            .map(|c| Ok(Estimate::from_samples(&self.samples(&self.state(c.as_ref(), z)?, &table))))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].mean.total_cmp(&values[a].mean).then(a.cmp(&b)));
        let argmax = order[0];
        let runner_up_gap = order.get(1).map_or(f64::INFINITY, |&i| values[argmax].mean - values[i].mean);
        Ok(BruteForceResult { values, argmax, runner_up_gap })
    }
}

/// `f((a+b)/2) ≥ (f(a)+f(b))/2` up to rounding.
pub fn concave_chord(f: impl Fn(f64) -> f64, a: f64, b: f64) -> bool {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    fm >= 0.5 * (fa + fb) - 1e-9 * (1.0 + fa.abs() + fb.abs())
}

/// Trapezoid weights on possibly non-uniform nodes.
pub fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = nodes[i + 1] - nodes[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Maximizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_peak() {
        let x = golden_section(|u| u - u * u, -1.0, 1.0, 1e-8);
        assert!((x - 0.5).abs() < 1e-6);
    }

    #[test]
    fn chords_detect_convexity() {
        assert!(concave_chord(f64::ln, 0.5, 3.0));
        assert!(!concave_chord(|x| x * x, -1.0, 2.0));
        assert!(concave_chord(|x| 2.0 * x + 1.0, -1.0, 2.0));
    }

    #[test]
    fn weights_sum_to_window() {
        let w = trapezoid_weights(&[-1.0, 0.0, 0.5, 2.0]);
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-15);
        assert_eq!(w[0], 0.5);
    }
}
