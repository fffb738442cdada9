//! Hamiltonians and the adjoint BSDE
//!
//! ```text
//! dp(t) = −∂H/∂x dt + q dB(t) + ∫ r(ζ) Ñ(dt, dζ),   p(T) = ∂g/∂x(X(T)) M(T, z)
//! ```
//!
//! solved backwards by least-squares Monte Carlo. `H = H₀ + H₁`, where `H₁`
//! collects the future-kernel terms `∫_t^T ∂_s b(s,t) p(s) ds` and the
//! analogous `σ`, `γ` terms weighted by the conditional Malliavin traces of
//! `p`. Those traces are read off the martingale representation of `p(s)`
//! over the step `[t, t + Δt]`.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::donsker::DonskerTable;
use crate::paths::{DriverPaths, LevyModel, TimeGrid};
use crate::regression::{Basis, Projector, RegressionSpec};
use crate::svie::{fd_step, has_time_dependent_kernels, is_x_free, StateField, VolterraCoefficients};
use crate::{Error, Result};

/// Running reward `f(t, x, u, z)` and terminal reward `g(x, z)`.
pub trait PerformanceSpec: Sync {
    fn f(&self, t: f64, x: f64, u: f64, z: f64) -> f64;
    fn g(&self, x: f64, z: f64) -> f64;

    fn df_dx(&self, t: f64, x: f64, u: f64, z: f64) -> f64 {
        let h = fd_step(x);
        (self.f(t, x + h, u, z) - self.f(t, x - h, u, z)) / (2.0 * h)
    }
    fn df_du(&self, t: f64, x: f64, u: f64, z: f64) -> f64 {
        let h = fd_step(u);
        (self.f(t, x, u + h, z) - self.f(t, x, u - h, z)) / (2.0 * h)
    }
    fn dg_dx(&self, x: f64, z: f64) -> f64 {
        let h = fd_step(x);
        (self.g(x + h, z) - self.g(x - h, z)) / (2.0 * h)
    }
}

type RewardFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
type TerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Performance functional from closures, with optional closed-form `∂g/∂x`.
#[derive(Clone)]
pub struct FnPerformance {
    f: RewardFn,
    g: TerminalFn,
    dg: Option<TerminalFn>,
}

impl std::fmt::Debug for FnPerformance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnPerformance").finish_non_exhaustive()
    }
}

impl FnPerformance {
    pub fn new(
        f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnPerformance { f: Arc::new(f), g: Arc::new(g), dg: None }
    }

    pub fn with_dg_dx(mut self, dg: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.dg = Some(Arc::new(dg));
        self
    }
}

impl PerformanceSpec for FnPerformance {
    fn f(&self, t: f64, x: f64, u: f64, z: f64) -> f64 {
        (self.f)(t, x, u, z)
    }
    fn g(&self, x: f64, z: f64) -> f64 {
        (self.g)(x, z)
    }
    fn dg_dx(&self, x: f64, z: f64) -> f64 {
        match &self.dg {
            Some(d) => d(x, z),
            None => {
                let h = fd_step(x);
                ((self.g)(x + h, z) - (self.g)(x - h, z)) / (2.0 * h)
            }
        }
    }
}

/// `H₀ = f M + b(t,t) p + σ(t,t) q + Σᵢ γ(t,t,ζᵢ) r(ζᵢ) λpᵢ`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_h0(
    t: f64,
    x: f64,
    u: f64,
    z: f64,
    p: f64,
    q: f64,
    r: &[f64],
    m: f64,
    coeffs: &dyn VolterraCoefficients,
    perf: &dyn PerformanceSpec,
    levy: &LevyModel,
) -> f64 {
    let mut h = perf.f(t, x, u, z) * m + coeffs.b(t, t, x, u, z) * p + coeffs.sigma(t, t, x, u, z) * q;
    for (i, mark) in levy.marks().iter().enumerate() {
        h += coeffs.gamma(t, t, x, u, z, mark.size) * r[i] * levy.weight(i);
    }
    h
}

/// Future adjoint values along one scenario from step `k` to `N`.
#[derive(Debug, Clone, Copy)]
pub struct FutureAdjoint<'a> {
    /// `p(t_j)` for `j = k..=N`.
    pub p: &'a [f64],
    /// `E[D_{t_k} p(t_j) | F_{t_k}]` for `j = k..=N`.
    pub trace_b: &'a [f64],
    /// `E[D_{t_k,ζᵢ} p(t_j) | F_{t_k}]`, laid out `[j − k][i]`.
    pub trace_n: &'a [f64],
}

/// `H₁` by a Stieltjes trapezoid in the first kernel argument:
/// `Σ_j ½(p_j + p_{j+1}) (b(t_{j+1}, t) − b(t_j, t))` and likewise for the
/// `σ` and `γ` terms with the traces. Telescopes exactly for constant `p`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_h1(
    k: usize,
    x: f64,
    u: f64,
    z: f64,
    future: &FutureAdjoint<'_>,
    coeffs: &dyn VolterraCoefficients,
    grid: &TimeGrid,
    levy: &LevyModel,
) -> Result<f64> {
    let n = grid.n_steps();
    let len = n + 1 - k;
    let n_marks = levy.marks().len();
    if future.p.len() < len || future.trace_b.len() < len || future.trace_n.len() < len * n_marks {
        return Err(Error::param("traces", format!("need {len} future values from step {k}")));
    }
    let t = grid.t(k);
    let mut h = 0.0;
    let mut b_prev = coeffs.b(t, t, x, u, z);
    let mut s_prev = coeffs.sigma(t, t, x, u, z);
    let mut g_prev: Vec<f64> = levy.marks().iter().map(|m| coeffs.gamma(t, t, x, u, z, m.size)).collect();
    for j in 0..len - 1 {
        let s = grid.t(k + j + 1);
        let b_next = coeffs.b(s, t, x, u, z);
        let s_next = coeffs.sigma(s, t, x, u, z);
        h += 0.5 * (future.p[j] + future.p[j + 1]) * (b_next - b_prev);
        h += 0.5 * (future.trace_b[j] + future.trace_b[j + 1]) * (s_next - s_prev);
        for (i, mark) in levy.marks().iter().enumerate() {
            let g_next = coeffs.gamma(s, t, x, u, z, mark.size);
            let tr = 0.5 * (future.trace_n[j * n_marks + i] + future.trace_n[(j + 1) * n_marks + i]);
            h += tr * (g_next - g_prev[i]) * levy.weight(i);
            g_prev[i] = g_next;
        }
        b_prev = b_next;
        s_prev = s_next;
    }
    Ok(h)
}

/// `H₀`, `H₁`, their sum and partials in `u` and `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HamiltonianEval {
    pub h0: f64,
    pub h1: f64,
    pub h: f64,
    pub dh_du: f64,
    pub dh_dx: f64,
}

/// Adjoint values at one `(t_k, scenario)`.
#[derive(Debug, Clone, Copy)]
pub struct AdjointPoint<'a> {
    pub k: usize,
    pub m: f64,
    pub p: f64,
    pub q: f64,
    pub r: &'a [f64],
    pub future: Option<FutureAdjoint<'a>>,
}

/// Shared model pieces for Hamiltonian evaluation.
#[derive(Clone, Copy)]
pub struct HamiltonianModel<'a> {
    pub coeffs: &'a dyn VolterraCoefficients,
    pub perf: &'a dyn PerformanceSpec,
    pub levy: &'a LevyModel,
    pub grid: &'a TimeGrid,
    pub z: f64,
}

impl HamiltonianModel<'_> {
    pub fn h(&self, at: &AdjointPoint<'_>, x: f64, u: f64) -> (f64, f64) {
        let t = self.grid.t(at.k);
        let h0 = hamiltonian_h0(t, x, u, self.z, at.p, at.q, at.r, at.m, self.coeffs, self.perf, self.levy);
        let h1 = match &at.future {
            Some(f) => hamiltonian_h1(at.k, x, u, self.z, f, self.coeffs, self.grid, self.levy).unwrap_or(f64::NAN),
            None => 0.0,
        };
        (h0, h1)
    }

    pub fn eval(&self, at: &AdjointPoint<'_>, x: f64, u: f64) -> HamiltonianEval {
        let (h0, h1) = self.h(at, x, u);
        let hu = fd_step(u);
        let hx = fd_step(x);
        let total = |x: f64, u: f64| {
            let (a, b) = self.h(at, x, u);
            a + b
        };
        HamiltonianEval {
            h0,
            h1,
            h: h0 + h1,
            dh_du: (total(x, u + hu) - total(x, u - hu)) / (2.0 * hu),
            dh_dx: (total(x + hx, u) - total(x - hx, u)) / (2.0 * hx),
        }
    }

    /// Second central difference in `u`.
    pub fn d2h_du2(&self, at: &AdjointPoint<'_>, x: f64, u: f64) -> f64 {
        let h = 1e-3 * (1.0 + u.abs());
        let total = |u: f64| {
            let (a, b) = self.h(at, x, u);
            a + b
        };
        (total(u + h) - 2.0 * total(u) + total(u - h)) / (h * h)
    }

    /// [`eval`](Self::eval) and `∂²H/∂u²` from one shared `u` stencil. When
    /// the kernels ignore `x`, the `x` leg differentiates `H₀` alone.
    pub fn stencil(&self, at: &AdjointPoint<'_>, x: f64, u: f64, kernels_use_x: bool) -> (HamiltonianEval, f64) {
        let total = |x: f64, u: f64| {
            let (a, b) = self.h(at, x, u);
            a + b
        };
        let (h0, h1) = self.h(at, x, u);
        let hu = 1e-4 * (1.0 + u.abs());
        let (up, um) = (total(x, u + hu), total(x, u - hu));
        let hx = fd_step(x);
        let dh_dx = if kernels_use_x {
            (total(x + hx, u) - total(x - hx, u)) / (2.0 * hx)
        } else {
            let t = self.grid.t(at.k);
            let h0x = |x: f64| hamiltonian_h0(t, x, u, self.z, at.p, at.q, at.r, at.m, self.coeffs, self.perf, self.levy);
            (h0x(x + hx) - h0x(x - hx)) / (2.0 * hx)
        };
        let h = h0 + h1;
        let eval = HamiltonianEval { h0, h1, h, dh_du: (up - um) / (2.0 * hu), dh_dx };
        (eval, (up - 2.0 * h + um) / (hu * hu))
    }
}

/// When to estimate the conditional traces `E[D_t p(s) | F_t]` for `s > t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Only if some kernel depends on its first argument.
    #[default]
    Auto,
    Always,
    /// Never; `H₁` is dropped.
    Never,
}

/// Which `F_{t_k}`-measurable statistics enter the regression basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub state: bool,
    pub signal: bool,
    pub brownian: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features { state: true, signal: true, brownian: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointOptions {
    pub regression: RegressionSpec,
    pub traces: TraceMode,
    pub features: Features,
    /// Keep the full trace table (memory `n · N² / 2`).
    pub store_traces: bool,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions {
            regression: RegressionSpec::default(),
            traces: TraceMode::Auto,
            features: Features::default(),
            store_traces: false,
        }
    }
}

/// `(p, q, r)` per scenario plus Hamiltonian partials along the solution.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub z: f64,
    n_scenarios: usize,
    n_steps: usize,
    n_marks: usize,
    /// `[k][s]`, `k = 0..=N`.
    p: Vec<Vec<f64>>,
    /// `[k][s]`, `k = 0..N`.
    q: Vec<Vec<f64>>,
    /// `[k][i][s]`.
    r: Vec<Vec<Vec<f64>>>,
    /// `∂H/∂u` and `∂²H/∂u²` at the applied control, `[k][s]`.
    dh_du: Vec<Vec<f64>>,
    d2h_du2: Vec<Vec<f64>>,
    /// `E[D_{t_k} p(t_j) | F_{t_k}]` as `[k][j − k][s]` when stored.
    traces: Option<Vec<Vec<Vec<f64>>>>,
    pub includes_h1: bool,
    /// Regression rank per step.
    pub ranks: Vec<usize>,
}

impl AdjointSolution {
    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn p(&self, s: usize, k: usize) -> f64 {
        self.p[k][s]
    }

    pub fn q(&self, s: usize, k: usize) -> f64 {
        self.q[k][s]
    }

    pub fn r(&self, s: usize, k: usize, mark: usize) -> f64 {
        self.r[k][mark][s]
    }

    pub fn p_slice(&self, k: usize) -> &[f64] {
        &self.p[k]
    }

    pub fn q_slice(&self, k: usize) -> &[f64] {
        &self.q[k]
    }

    pub fn dh_du_slice(&self, k: usize) -> &[f64] {
        &self.dh_du[k]
    }

    pub fn d2h_du2_slice(&self, k: usize) -> &[f64] {
        &self.d2h_du2[k]
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    /// `E[D_{t_k} p(t_j) | F_{t_k}]` on scenario `s`, for `j ≥ k`.
    pub fn trace(&self, s: usize, k: usize, j: usize) -> Option<f64> {
        self.traces.as_ref().and_then(|t| t.get(k).and_then(|row| row.get(j.checked_sub(k)?)).map(|c| c[s]))
    }

    /// CSV `(scenario, t, z, p, q)`; `q` is empty at `T`.
    pub fn write_csv(&self, out: &mut impl Write, grid: &TimeGrid, scenarios: &[usize], config_hash: &str) -> Result<()> {
        writeln!(out, "# config-hash: {config_hash}")?;
        writeln!(out, "scenario,t,z,p,q")?;
        for &s in scenarios {
            for k in 0..=self.n_steps {
                let q = if k < self.n_steps { format!("{:e}", self.q[k][s]) } else { String::new() };
                writeln!(out, "{s},{},{},{:e},{q}", grid.t(k), self.z, self.p[k][s])?;
            }
        }
        Ok(())
    }
}

/// `ΔB_k` and `ΔÑ_{k,i}` as cross-scenario columns.
pub(crate) struct IncrementColumns {
    pub db: Vec<Vec<f64>>,
    pub dn: Vec<Vec<Vec<f64>>>,
}

impl IncrementColumns {
    pub(crate) fn new(paths: &DriverPaths) -> Self {
        let n = paths.n_steps();
        let m = paths.levy().marks().len();
        let mut db = vec![Vec::with_capacity(paths.n_scenarios()); n];
        let mut dn = vec![vec![Vec::with_capacity(paths.n_scenarios()); m]; n];
        for s in 0..paths.n_scenarios() {
            let inc = paths.increments(s);
            let counts = if paths.levy().is_active() { paths.compensated_counts(s) } else { Vec::new() };
            for k in 0..n {
                db[k].push(inc[k]);
                for i in 0..m {
                    dn[k][i].push(counts[k * m + i]);
                }
            }
        }
        IncrementColumns { db, dn }
    }

    pub(crate) fn martingale(&self, k: usize, jumps: bool) -> Vec<&[f64]> {
        let mut cols: Vec<&[f64]> = vec![&self.db[k]];
        if jumps {
            cols.extend(self.dn[k].iter().map(|c| c.as_slice()));
        }
        cols
    }
}

/// Regression basis at step `k` from the selected features and the density weight.
pub(crate) fn step_basis(
    k: usize,
    state: &StateField,
    table: &DonskerTable,
    signal: Option<&crate::chaos::SignalPaths>,
    brownian: Option<&[Vec<f64>]>,
    features: Features,
    spec: &RegressionSpec,
) -> Basis {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if features.state {
        cols.push(state.slice(k));
    }
    if features.signal {
        if let Some(sig) = signal {
            cols.push(sig.slice(k));
        }
    }
    if features.brownian {
        if let Some(b) = brownian {
            cols.push(b[k].clone());
        }
    }
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let m = table.is_informed().then(|| table.m_slice(k));
    Basis::new(&refs, m.as_deref(), spec)
}

/// Brownian paths `B(t_k)` as cross-scenario columns.
pub(crate) fn brownian_columns(paths: &DriverPaths) -> Vec<Vec<f64>> {
    let n = paths.n_steps();
    let mut out = vec![vec![0.0; paths.n_scenarios()]; n + 1];
    for s in 0..paths.n_scenarios() {
        let mut b = 0.0;
        for (k, dw) in paths.increments(s).iter().enumerate() {
            b += dw;
            out[k + 1][s] = b;
        }
    }
    out
}

/// Backward explicit scheme:
/// regress `p_{k+1}` on `[φ_k, φ_k ΔB_k, φ_k ΔÑ_k]` to get `E[p_{k+1}|F_k]`,
/// `q_k`, `r_k`; form the driver `∂H/∂x`; set
/// `p_k = E[p_{k+1} + ∂H/∂x Δt | F_k]`.
#[allow(clippy::too_many_arguments)]
pub fn solve_adjoint_bsde(
    coeffs: &dyn VolterraCoefficients,
    perf: &dyn PerformanceSpec,
    state: &StateField,
    table: &DonskerTable,
    signal: Option<&crate::chaos::SignalPaths>,
    paths: &DriverPaths,
    grid: &TimeGrid,
    opts: &AdjointOptions,
) -> Result<AdjointSolution> {
    let n = grid.n_steps();
    let ns = paths.n_scenarios();
    let z = state.z;
    if state.n_scenarios() != ns || state.n_points() != n + 1 || table.n_points() != n + 1 {
        return Err(Error::param("state", "state, density table and grid disagree"));
    }
    let levy = paths.levy();
    let jumps = levy.is_active();
    let n_marks = levy.marks().len();
    let zetas: Vec<f64> = levy.marks().iter().map(|m| m.size).collect();
    let time_dep = has_time_dependent_kernels(coeffs, z, &zetas);
    let x_free = is_x_free(coeffs, z, &zetas);
    let with_h1 = match opts.traces {
        TraceMode::Never => false,
        TraceMode::Always => true,
        TraceMode::Auto => time_dep,
    };
    let model = HamiltonianModel { coeffs, perf, levy, grid, z };
    let inc = IncrementColumns::new(paths);
    let brownian = opts.features.brownian.then(|| brownian_columns(paths));
    let dt = grid.dt();

    let mut p: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    p[n] = (0..ns).map(|s| perf.dg_dx(state.x(s, n), z) * table.m(s, n)).collect();
    let mut q = vec![Vec::new(); n];
    let mut r = vec![Vec::new(); n];
    let mut dh_du = vec![Vec::new(); n];
    let mut d2h = vec![Vec::new(); n];
    let mut traces_store: Option<Vec<Vec<Vec<f64>>>> = opts.store_traces.then(|| vec![Vec::new(); n]);
    let mut ranks = vec![0; n];

    for k in (0..n).rev() {
        let basis = step_basis(k, state, table, signal, brownian.as_deref(), opts.features, &opts.regression);
        let proj = Projector::new(&basis, &inc.martingale(k, jumps), &opts.regression)?;
        ranks[k] = proj.rank();
        let fit = proj.fit(&p[k + 1])?;
        let qk = fit.integrands[0].clone();
        let rk: Vec<Vec<f64>> = (0..n_marks).map(|i| fit.integrands[1 + i].clone()).collect();
        // Traces E[D_{t_k} p(t_j) | F_{t_k}] for j = k..=N: diagonal and first
        // off-diagonal both equal q_k.
        let mut tr_b: Vec<Vec<f64>> = Vec::new();
        let mut tr_n: Vec<Vec<Vec<f64>>> = Vec::new();
        if with_h1 || opts.store_traces {
            tr_b.push(qk.clone());
            tr_b.push(qk.clone());
            tr_n.push(rk.clone());
            tr_n.push(rk.clone());
            for j in k + 2..=n {
                let f = proj.fit(&p[j])?;
                tr_b.push(f.integrands[0].clone());
                tr_n.push((0..n_marks).map(|i| f.integrands[1 + i].clone()).collect());
            }
        }
        let cond = &fit.conditional;
        let per: Vec<(f64, f64, f64)> = (0..ns)
            .into_par_iter()
            .map(|s| {
                let r_s: Vec<f64> = (0..n_marks).map(|i| rk[i][s]).collect();
                let (pf, tb, tn);
                let future = if with_h1 {
                    let mut pv = Vec::with_capacity(n + 1 - k);
                    pv.push(cond[s]);
                    pv.extend((k + 1..=n).map(|j| p[j][s]));
                    pf = pv;
                    tb = tr_b.iter().map(|c| c[s]).collect::<Vec<f64>>();
                    tn = tr_n.iter().flat_map(|row| row.iter().map(|c| c[s]).collect::<Vec<_>>()).collect::<Vec<f64>>();
                    Some(FutureAdjoint { p: &pf, trace_b: &tb, trace_n: &tn })
                } else {
                    None
                };
                let at = AdjointPoint { k, m: table.m(s, k), p: cond[s], q: qk[s], r: &r_s, future };
                let x = state.x(s, k);
                let u = state.u(s, k);
                let (e, d2) = model.stencil(&at, x, u, !x_free);
                (e.dh_dx, e.dh_du, d2)
            })
            .collect();
        let target: Vec<f64> = (0..ns).map(|s| p[k + 1][s] + per[s].0 * dt).collect();
        p[k] = if per.iter().all(|v| v.0 == 0.0) { cond.clone() } else { proj.conditional(&target)? };
        dh_du[k] = per.iter().map(|v| v.1).collect();
        d2h[k] = per.iter().map(|v| v.2).collect();
        q[k] = qk;
        r[k] = rk;
        if let Some(store) = traces_store.as_mut() {
            store[k] = tr_b;
        }
    }
    Ok(AdjointSolution {
        z,
        n_scenarios: ns,
        n_steps: n,
        n_marks,
        p,
        q,
        r,
        dh_du,
        d2h_du2: d2h,
        traces: traces_store,
        includes_h1: with_h1,
        ranks,
    })
}

/// Reduced Hamiltonian of the `x`-free case at step `k`:
/// `f M + b(T,t,u) P + σ(T,t,u) Q + Σ γ(T,t,u,ζᵢ) Rᵢ λpᵢ` with
/// `P = E[g′(X(T)) M(T) | F_t]` and `Q`, `R` its conditional traces, read
/// from an adjoint solution of the same model.
#[allow(clippy::too_many_arguments)]
pub fn reduced_hamiltonian(
    k: usize,
    s: usize,
    u: f64,
    table: &DonskerTable,
    adjoint: &AdjointSolution,
    coeffs: &dyn VolterraCoefficients,
    perf: &dyn PerformanceSpec,
    levy: &LevyModel,
    grid: &TimeGrid,
) -> Result<f64> {
    let z = adjoint.z;
    let zetas: Vec<f64> = levy.marks().iter().map(|m| m.size).collect();
    if !is_x_free(coeffs, z, &zetas) {
        return Err(Error::Refused("reduced Hamiltonian needs coefficients free of x".into()));
    }
    let t = grid.t(k);
    let big_t = grid.t_max();
    // x is irrelevant; 0 is as good as any probe.
    let mut h = perf.f(t, 0.0, u, z) * table.m(s, k)
        + coeffs.b(big_t, t, 0.0, u, z) * adjoint.p(s, k)
        + coeffs.sigma(big_t, t, 0.0, u, z) * adjoint.q(s, k);
    for (i, mark) in levy.marks().iter().enumerate() {
        h += coeffs.gamma(big_t, t, 0.0, u, z, mark.size) * adjoint.r(s, k, i) * levy.weight(i);
    }
    Ok(h)
}

/// Both sides of the duality
/// `E[∫₀ᵀ (∫₀ᵗ dB) p(t) dt] = E[∫₀ᵀ ∫_t^T E[D_t p(s) | F_t] ds dt]`
/// for a process `p` given as `[k][s]` on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityReport {
    pub brownian_side: crate::stats::Estimate,
    pub trace_side: crate::stats::Estimate,
}

/// Traces come from a tower of one-step regressions: the `ΔB_k` coefficient
/// of `E[p(t_j) | F_{t_{k+1}}]` on `F_{t_k}`-measurable functions of `B(t_k)`,
/// with the diagonal `s = t` taken equal to the first off-diagonal. Both
/// integrals use the trapezoid rule.
pub fn duality_identity(p: &[Vec<f64>], paths: &DriverPaths, grid: &TimeGrid, spec: &RegressionSpec) -> Result<DualityReport> {
    let n = grid.n_steps();
    let ns = paths.n_scenarios();
    if p.len() != n + 1 || p.iter().any(|c| c.len() != ns) {
        return Err(Error::param("p", "need one column per grid point"));
    }
    let dt = grid.dt();
    let bm = brownian_columns(paths);
    let inc = IncrementColumns::new(paths);
    let spec = spec.clone().with_weight(crate::regression::WeightMode::None);
    let projectors = (0..n)
        .map(|k| Projector::new(&Basis::new(&[&bm[k]], None, &spec), &[&inc.db[k]], &spec))
        .collect::<Result<Vec<_>>>()?;
    // inner[k][s] = ∫_{t_k}^T trace(k, s') ds'
    let mut traces: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n + 1]; n];
    for j in 1..=n {
        let mut y = p[j].clone();
        for k in (0..j).rev() {
            let fit = projectors[k].fit(&y)?;
            traces[k][j] = fit.integrands.into_iter().next().unwrap_or_default();
            y = fit.conditional;
        }
    }
    let mut inner = vec![vec![0.0; ns]; n + 1];
    for k in 0..n {
        traces[k][k] = traces[k][k + 1].clone();
        for (s, v) in inner[k].iter_mut().enumerate() {
            let col: Vec<f64> = (k..=n).map(|j| traces[k][j][s]).collect();
            *v = crate::stats::trapezoid(&col, dt);
        }
    }
    let trace_samples: Vec<f64> = (0..ns)
        .map(|s| crate::stats::trapezoid(&(0..=n).map(|k| inner[k][s]).collect::<Vec<_>>(), dt))
        .collect();
    let brownian_samples: Vec<f64> = (0..ns)
        .map(|s| crate::stats::trapezoid(&(0..=n).map(|k| bm[k][s] * p[k][s]).collect::<Vec<_>>(), dt))
        .collect();
    Ok(DualityReport {
        brownian_side: crate::stats::Estimate::from_samples(&brownian_samples),
        trace_side: crate::stats::Estimate::from_samples(&trace_samples),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svie::FnCoefficients;

    fn zero() -> FnCoefficients {
        FnCoefficients::new(|_, _| 0.0, |_, _, _, _, _| 0.0, |_, _, _, _, _| 0.0)
    }

    #[test]
    fn h0_vanishes_for_zero_model() {
        let perf = FnPerformance::new(|_, _, _, _| 0.0, |_, _| 0.0);
        let h = hamiltonian_h0(0.3, 1.0, 2.0, 0.0, 5.0, 7.0, &[], 1.0, &zero(), &perf, &LevyModel::none());
        assert_eq!(h, 0.0);
    }

    #[test]
    fn h0_arithmetic() {
        let c = FnCoefficients::new(|_, _| 0.0, |_, _, _, u, _| u, |_, _, _, _, _| 0.0);
        let perf = FnPerformance::new(|_, _, u, _| u * u, |_, _| 0.0);
        let h = hamiltonian_h0(0.0, 0.0, 3.0, 0.0, 2.0, 0.0, &[], 1.0, &c, &perf, &LevyModel::none());
        assert_eq!(h, 15.0);
    }

    #[test]
    fn h0_jump_term_uses_levy_weights() {
        let c = FnCoefficients::new(|_, _| 0.0, |_, _, _, _, _| 0.0, |_, _, _, _, _| 0.0)
            .with_gamma(|_, _, _, u, _, zeta| u * zeta);
        let perf = FnPerformance::new(|_, _, _, _| 0.0, |_, _| 0.0);
        let l = LevyModel::single(2.0, 0.5).unwrap();
        let h = hamiltonian_h0(0.0, 0.0, 3.0, 0.0, 0.0, 0.0, &[4.0], 1.0, &c, &perf, &l);
        assert_eq!(h, 3.0 * 0.5 * 4.0 * 2.0);
    }

    #[test]
    fn h1_unit_integrand() {
        let g = TimeGrid::new(1.0, 2.0, 10).unwrap();
        let c = FnCoefficients::new(|_, _| 0.0, |t, _, _, _, _| t, |_, _, _, _, _| 0.0);
        let ones = vec![1.0; 11];
        let f = FutureAdjoint { p: &ones, trace_b: &ones, trace_n: &[] };
        let h = hamiltonian_h1(0, 0.0, 0.0, 0.0, &f, &c, &g, &LevyModel::none()).unwrap();
        assert!((h - 1.0).abs() < 1e-14);
    }

    #[test]
    fn h1_vanishes_for_time_free_kernels() {
        let g = TimeGrid::new(1.0, 2.0, 10).unwrap();
        let c = FnCoefficients::new(|_, _| 0.0, |_, s, x, u, _| s + x * u, |_, _, _, u, _| u);
        let v: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let f = FutureAdjoint { p: &v, trace_b: &v, trace_n: &[] };
        assert_eq!(hamiltonian_h1(3, 0.4, 0.2, 0.0, &f, &c, &g, &LevyModel::none()).unwrap(), 0.0);
    }

    #[test]
    fn h1_telescopes_for_constant_adjoint() {
        let g = TimeGrid::new(1.0, 2.0, 32).unwrap();
        let c = FnCoefficients::new(
            |_, _| 0.0,
            |t, s, _, u, _| (t - s).exp() * u + t * t,
            |t, s, _, u, _| (1.0 + t - s) * u.sin(),
        );
        let k = 5;
        let big_p = vec![0.731; 33 - k];
        let big_q = vec![-1.37; 33 - k];
        let f = FutureAdjoint { p: &big_p, trace_b: &big_q, trace_n: &[] };
        let (t, u) = (g.t(k), 0.4);
        let h = hamiltonian_h1(k, 0.0, u, 0.0, &f, &c, &g, &LevyModel::none()).unwrap();
        let expect = (c.b(1.0, t, 0.0, u, 0.0) - c.b(t, t, 0.0, u, 0.0)) * 0.731
            + (c.sigma(1.0, t, 0.0, u, 0.0) - c.sigma(t, t, 0.0, u, 0.0)) * -1.37;
        assert!((h - expect).abs() < 1e-10);
    }

    #[test]
    fn missing_traces_are_rejected() {
        let g = TimeGrid::new(1.0, 2.0, 10).unwrap();
        let f = FutureAdjoint { p: &[1.0; 3], trace_b: &[1.0; 3], trace_n: &[] };
        assert!(hamiltonian_h1(0, 0.0, 0.0, 0.0, &f, &zero(), &g, &LevyModel::none()).is_err());
    }
}
