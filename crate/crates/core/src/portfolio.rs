//! Optimal insider portfolio in a Volterra market
//!
//! ```text
//! X(t) = x₀ + ∫₀ᵗ b₀(t,s,z) π(s) X(s) ds + ∫₀ᵗ σ₀(t,s,z) π(s) X(s) dB(s)
//! ```
//!
//! The optimal terminal wealth is `F(c) = (U′)⁻¹(c · Y(T)/Y(0) · M(0,z)/M(T,z))`
//! with `Y` the exponential martingale of `θ₀(t) = −b₀(T,t)/σ₀(T,t)`. The pair
//! `(X̂, K̂)` solves the backward Volterra equation
//!
//! ```text
//! X̂(t) = F(c) − ∫_t^T (b₀/σ₀)(t,s) K̂(t,s) ds − ∫_t^T K̂(t,s) dB(s),
//! ```
//!
//! `c` is fixed by the budget `X̂(0) = x₀`, and the traded fraction is
//! `π̂(s) = K̂(s,s) / (σ₀(s,s) X̂(s))`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{brownian_columns, IncrementColumns};
use crate::donsker::{DonskerField, DonskerTable, InformationField};
use crate::paths::{DriverPaths, TimeGrid};
use crate::stats::Estimate;
use crate::regression::{Basis, Projector, RegressionSpec, WeightMode};
use crate::svie::{solve_forward, StateField, Tabulated, VolterraCoefficients};
use crate::{Error, Result};

/// Concave utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Utility {
    Log,
    /// `U(x) = x^γ / γ`, `0 < γ < 1`.
    Power { gamma: f64 },
}

impl Utility {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Utility::Log => Ok(()),
            Utility::Power { gamma } if gamma > 0.0 && gamma < 1.0 => Ok(()),
            Utility::Power { gamma } => Err(Error::param("utility.gamma", format!("must lie in (0, 1), got {gamma}"))),
        }
    }

    pub fn u(&self, x: f64) -> f64 {
        match *self {
            Utility::Log => x.ln(),
            Utility::Power { gamma } => x.powf(gamma) / gamma,
        }
    }

    pub fn du(&self, x: f64) -> f64 {
        match *self {
            Utility::Log => 1.0 / x,
            Utility::Power { gamma } => x.powf(gamma - 1.0),
        }
    }

    /// `(U′)⁻¹(y)`.
    pub fn inv_du(&self, y: f64) -> f64 {
        match *self {
            Utility::Log => 1.0 / y,
            Utility::Power { gamma } => y.powf(1.0 / (gamma - 1.0)),
        }
    }

    /// `κ` with `F(c) ∝ c^{−κ}` and `X̂ ∝ M^κ`.
    pub fn donsker_exponent(&self) -> f64 {
        match *self {
            Utility::Log => 1.0,
            Utility::Power { gamma } => 1.0 / (1.0 - gamma),
        }
    }
}

pub type MarketKernel = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Kernels `b₀(t,s,z)`, `σ₀(t,s,z) ≥ c₀`, initial wealth and utility.
#[derive(Clone)]
pub struct MarketSpec {
    b0: MarketKernel,
    sigma0: MarketKernel,
    pub c0: f64,
    pub x0: f64,
    pub utility: Utility,
    /// Flips the sign of `θ₀`; only for mutation tests.
    #[doc(hidden)]
    pub mutate_theta0_sign: bool,
}

impl std::fmt::Debug for MarketSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarketSpec")
            .field("c0", &self.c0)
            .field("x0", &self.x0)
            .field("utility", &self.utility)
            .finish_non_exhaustive()
    }
}

impl MarketSpec {
    pub fn new(
        b0: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma0: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        c0: f64,
        x0: f64,
        utility: Utility,
    ) -> Result<Self> {
        if !(x0 > 0.0) {
            return Err(Error::param("x0", format!("initial wealth must be positive, got {x0}")));
        }
        if !(c0 > 0.0) {
            return Err(Error::param("c0", format!("volatility floor must be positive, got {c0}")));
        }
        utility.validate()?;
        Ok(MarketSpec { b0: Arc::new(b0), sigma0: Arc::new(sigma0), c0, x0, utility, mutate_theta0_sign: false })
    }

    /// Classical kernels constant in `(t, s)`.
    pub fn constant(b0: f64, sigma0: f64, x0: f64, utility: Utility) -> Result<Self> {
        let m = Self::new(move |_, _, _| b0, move |_, _, _| sigma0, sigma0.abs().min(1.0).max(1e-12), x0, utility)?;
        if !(sigma0 > 0.0) {
            return Err(Error::param("sigma0", format!("must be positive, got {sigma0}")));
        }
        Ok(m)
    }

    pub fn b0(&self, t: f64, s: f64, z: f64) -> f64 {
        (self.b0)(t, s, z)
    }

    pub fn sigma0(&self, t: f64, s: f64, z: f64) -> f64 {
        (self.sigma0)(t, s, z)
    }

    /// `(b₀/σ₀)(t, s, z)`.
    pub fn ratio(&self, t: f64, s: f64, z: f64) -> f64 {
        self.b0(t, s, z) / self.sigma0(t, s, z)
    }

    /// Checks `σ₀ ≥ c₀` on the grid for every `z` node.
    pub fn validate_on(&self, grid: &TimeGrid, z_nodes: &[f64]) -> Result<()> {
        for &z in z_nodes {
            for t in grid.points() {
                for s in grid.points().into_iter().filter(|&s| s <= t) {
                    let v = self.sigma0(t, s, z);
                    if !(v >= self.c0) {
                        return Err(Error::param(
                            "sigma0",
                            format!("volatility must stay bounded away from 0: sigma0({t}, {s}, {z}) = {v} < c0 = {}", self.c0),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// True when `b₀/σ₀` depends on its first argument.
    pub fn ratio_time_dependent(&self, grid: &TimeGrid, z: f64) -> bool {
        let t_max = grid.t_max();
        [0.0, 0.3, 0.7].iter().any(|&fs| {
            let s = fs * t_max;
            let r0 = self.ratio(s, s, z);
            [0.5, 1.0].iter().any(|&ft| (self.ratio(s + ft * (t_max - s), s, z) - r0).abs() > 1e-14 * (1.0 + r0.abs()))
        })
    }

    /// True when `b₀` or `σ₀` depends on its first argument.
    pub fn kernels_time_dependent(&self, grid: &TimeGrid, z: f64) -> bool {
        let t_max = grid.t_max();
        [0.0, 0.3, 0.7].iter().any(|&fs| {
            let s = fs * t_max;
            [0.5, 1.0].iter().any(|&ft| {
                let t = s + ft * (t_max - s);
                self.b0(t, s, z) != self.b0(s, s, z) || self.sigma0(t, s, z) != self.sigma0(s, s, z)
            })
        })
    }

    fn b0_vanishes(&self, grid: &TimeGrid, z: f64) -> bool {
        let pts = grid.points();
        pts.iter().all(|&t| pts.iter().filter(|&&s| s <= t).all(|&s| self.b0(t, s, z) == 0.0))
    }
}

/// `θ₀(t, z) = −b₀(T, t, z) / σ₀(T, t, z)`.
pub fn theta0(market: &MarketSpec, t: f64, z: f64, t_max: f64) -> Result<f64> {
    let s = market.sigma0(t_max, t, z);
    if !(s >= market.c0) {
        return Err(Error::param("sigma0", format!("sigma0(T, {t}, {z}) = {s} is below c0 = {}", market.c0)));
    }
    let th = -market.b0(t_max, t, z) / s;
    Ok(if market.mutate_theta0_sign { -th } else { th })
}

/// Exponential martingales along each scenario for one `z`, `[k][s]`.
#[derive(Debug, Clone)]
pub struct MartingaleFields {
    pub z: f64,
    /// `Y(t_k)/Y(0)` as the exact discrete exponential of the grid sums.
    pub y_ratio: Vec<Vec<f64>>,
    /// `M(t_k, z)` rebuilt from `Φ` by Itô sums with a Milstein correction.
    pub m_ito: Vec<Vec<f64>>,
    /// `M(t_k, z)` evaluated directly.
    pub m_direct: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub theta0: Vec<f64>,
}

/// `Y/Y(0)` and two representations of `M` for one `z`. Refuses markets with
/// jumps.
pub fn martingale_fields(market: &MarketSpec, field: &DonskerField, paths: &DriverPaths, grid: &TimeGrid, z: f64) -> Result<MartingaleFields> {
    if paths.levy().is_active() {
        return Err(Error::Refused("the portfolio pipeline covers markets without jumps only".into()));
    }
    let n = grid.n_steps();
    let ns = paths.n_scenarios();
    let table = field.table(z, ns, n + 1)?;
    let theta: Vec<f64> = (0..n).map(|k| theta0(market, grid.t(k), z, grid.t_max())).collect::<Result<_>>()?;
    let dt = grid.dt();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..ns)
        .into_par_iter()
        .map(|s| {
            let inc = paths.increments(s);
            let mut ly = 0.0;
            let mut lm = table.m(s, 0).ln();
            let mut y = vec![1.0];
            let mut m = vec![table.m(s, 0)];
            for k in 0..n {
                let t = grid.t(k);
                ly += theta[k] * inc[k] - 0.5 * theta[k] * theta[k] * dt;
                let phi = table.phi(s, k);
                let beta = field.spec().beta(t);
                let dphi_db = -beta * beta / field.remaining_variance(k).0;
                lm += phi * inc[k] - 0.5 * phi * phi * dt + 0.5 * dphi_db * (inc[k] * inc[k] - dt);
                y.push(ly.exp());
                m.push(lm.exp());
            }
            (y, m)
        })
        .collect();
    let mut y_ratio = vec![vec![0.0; ns]; n + 1];
    let mut m_ito = vec![vec![0.0; ns]; n + 1];
    for (s, (y, m)) in rows.into_iter().enumerate() {
        for k in 0..=n {
            y_ratio[k][s] = y[k];
            m_ito[k][s] = m[k];
        }
    }
    let m_direct = (0..=n).map(|k| table.m_slice(k)).collect();
    let phi = (0..=n).map(|k| (0..ns).map(|s| table.phi(s, k)).collect()).collect();
    Ok(MartingaleFields { z, y_ratio, m_ito, m_direct, phi, theta0: theta })
}

/// `F(c)` per scenario. The `Φ` part of the exponent is `ln(M(T)/M(0))`
/// from the direct evaluation of `M`.
pub fn terminal_wealth(market: &MarketSpec, c: f64, fields: &MartingaleFields) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::param("c", format!("must be positive, got {c}")));
    }
    let n = fields.y_ratio.len() - 1;
    Ok((0..fields.y_ratio[0].len())
        .map(|s| {
            let arg = c * fields.y_ratio[n][s] * fields.m_direct[0][s] / fields.m_direct[n][s];
            market.utility.inv_du(arg)
        })
        .collect())
}

/// Cached per-step projectors for the backward Volterra equation at one `z`.
pub struct BsvieCache {
    projectors: Vec<Projector>,
    time_dependent: bool,
    b0_zero: bool,
}

impl BsvieCache {
    /// Basis in `(B(t_k), Z(t_k))` times `M(t_k, z)^κ`.
    pub fn new(
        market: &MarketSpec,
        table: &DonskerTable,
        field: &dyn InformationField,
        paths: &DriverPaths,
        grid: &TimeGrid,
        spec: &RegressionSpec,
    ) -> Result<Self> {
        let n = grid.n_steps();
        let inc = IncrementColumns::new(paths);
        let bm = brownian_columns(paths);
        let spec = RegressionSpec { weight: WeightMode::Multiply(market.utility.donsker_exponent()), ..spec.clone() };
        let projectors = (0..n)
            .map(|k| {
                let mut feats: Vec<&[f64]> = vec![&bm[k]];
                let z_slice = field.signal_paths().map(|sig| sig.slice(k));
                if let Some(zs) = &z_slice {
                    feats.push(zs);
                }
                let m = table.is_informed().then(|| table.m_slice(k));
                let basis = Basis::new(&feats, m.as_deref(), &spec);
                Projector::new(&basis, &[&inc.db[k]], &spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BsvieCache {
            projectors,
            time_dependent: market.ratio_time_dependent(grid, table.z),
            b0_zero: market.b0_vanishes(grid, table.z),
        })
    }
}

/// `X̂(t_k)`, `K̂(t_k, t_k)` and the `t = 0` slice `K̂(0, t_k)`, all `[k][s]`.
#[derive(Debug, Clone)]
pub struct BsvieSolution {
    pub x_hat: Vec<Vec<f64>>,
    pub k_diag: Vec<Vec<f64>>,
    pub k_zero: Vec<Vec<f64>>,
    /// Count of non-positive `X̂` values.
    pub non_positive: usize,
}

/// One backward slice with kernel ratio `r(s) = (b₀/σ₀)(t_kk, s)`, from `N` down
/// to `kk`. Returns `(Y_j, K_j)` for `j = kk..=N` (with `K_N` unused).
fn slice(
    cache: &BsvieCache,
    terminal: &[f64],
    kk: usize,
    ratio: impl Fn(usize) -> f64,
    dt: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = cache.projectors.len();
    let mut y = vec![Vec::new(); n + 1 - kk];
    let mut kv = vec![Vec::new(); n - kk];
    y[n - kk] = terminal.to_vec();
    for j in (kk..n).rev() {
        let fit = cache.projectors[j].fit(&y[j + 1 - kk])?;
        let r = ratio(j);
        let kj = fit.integrands.into_iter().next().unwrap_or_default();
        y[j - kk] = fit.conditional.iter().zip(&kj).map(|(c, k)| c - r * k * dt).collect();
        kv[j - kk] = kj;
    }
    Ok((y, kv))
}

/// Backward scheme for `(X̂, K̂)`: a single sweep when `b₀/σ₀` does not
/// depend on its first argument, one sweep per `t_k` otherwise.
pub fn solve_bsvie(market: &MarketSpec, terminal: &[f64], z: f64, cache: &BsvieCache, grid: &TimeGrid) -> Result<BsvieSolution> {
    if terminal.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::param("terminal", "terminal wealth must be finite and positive"));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let (y0, k0) = slice(cache, terminal, 0, |j| market.ratio(0.0, grid.t(j), z), dt)?;
    let (x_hat, k_diag) = if cache.time_dependent {
        let mut xs = vec![y0[0].clone()];
        let mut ks = vec![k0[0].clone()];
        for kk in 1..n {
            let tk = grid.t(kk);
            let (y, kv) = slice(cache, terminal, kk, |j| market.ratio(tk, grid.t(j), z), dt)?;
            xs.push(y[0].clone());
            ks.push(kv[0].clone());
        }
        xs.push(terminal.to_vec());
        (xs, ks)
    } else {
        (y0.clone(), k0.clone())
    };
    let non_positive = x_hat.iter().flatten().filter(|v| **v <= 0.0).count();
    Ok(BsvieSolution { x_hat, k_diag, k_zero: k0, non_positive })
}

/// `E[X̂(0)] − x₀` with `E[X̂(0)] = E[F] − ∫ E[(b₀/σ₀)(0,s) K̂(0,s)] ds`.
pub fn budget_gap(market: &MarketSpec, terminal: &[f64], sol: Option<&BsvieSolution>, z: f64, grid: &TimeGrid) -> f64 {
    let ef = crate::stats::mean(terminal);
    let drift = match sol {
        Some(sol) => (0..grid.n_steps())
            .map(|k| market.ratio(0.0, grid.t(k), z) * crate::stats::mean(&sol.k_zero[k]))
            .sum::<f64>()
            * grid.dt(),
        None => 0.0,
    };
    ef - drift - market.x0
}

/// Bisection in `ln c` on the budget equation to relative tolerance `1e-6`.
/// The backward equation is re-solved for each candidate unless `b₀ ≡ 0`.
pub fn solve_c(
    market: &MarketSpec,
    fields: &MartingaleFields,
    cache: &BsvieCache,
    grid: &TimeGrid,
    bracket: (f64, f64),
) -> Result<(f64, Vec<f64>, Option<BsvieSolution>)> {
    let z = fields.z;
    let eval = |c: f64| -> Result<(f64, Vec<f64>, Option<BsvieSolution>)> {
        let f = terminal_wealth(market, c, fields)?;
        let sol = if cache.b0_zero { None } else { Some(solve_bsvie(market, &f, z, cache, grid)?) };
        Ok((budget_gap(market, &f, sol.as_ref(), z, grid), f, sol))
    };
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::param("bracket", format!("need 0 < lo < hi, got [{lo}, {hi}]")));
    }
    let g_lo = eval(lo)?.0;
    let g_hi = eval(hi)?.0;
    if g_lo.signum() == g_hi.signum() {
        return Err(Error::NoSignChange { lo, hi });
    }
    while (hi / lo).ln() > 1e-6 {
        let mid = (lo * hi).sqrt();
        let g = eval(mid)?.0;
        if g.signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = (lo * hi).sqrt();
    let (_, f, sol) = eval(c)?;
    let sol = match sol {
        Some(s) => s,
        None => solve_bsvie(market, &f, z, cache, grid)?,
    };
    Ok((c, f, Some(sol)))
}

/// `π̂` on the diagonal and, as a diagnostic, against the `t = 0` slice. `[k][s]`, `k < N`.
#[derive(Debug, Clone)]
pub struct PortfolioField {
    pub z: f64,
    pub diagonal: Vec<Vec<f64>>,
    pub slice_zero: Vec<Vec<f64>>,
}

impl PortfolioField {
    /// Largest RMS difference between the diagonal and `t = 0` conventions,
    /// relative to the RMS of the diagonal.
    pub fn convention_sensitivity(&self) -> f64 {
        self.diagonal
            .iter()
            .zip(&self.slice_zero)
            .map(|(d, s)| {
                let diff: Vec<f64> = d.iter().zip(s).map(|(a, b)| a - b).collect();
                crate::stats::rms(&diff) / crate::stats::rms(d).max(1e-300)
            })
            .fold(0.0, f64::max)
    }
}

/// `π̂(s) = K̂(s,s) / (σ₀(s,s) X̂(s))`.
pub fn optimal_portfolio(market: &MarketSpec, sol: &BsvieSolution, z: f64, grid: &TimeGrid) -> Result<PortfolioField> {
    let n = grid.n_steps();
    let mut diagonal = Vec::with_capacity(n);
    let mut slice_zero = Vec::with_capacity(n);
    for k in 0..n {
        let s = grid.t(k);
        if let Some((i, &v)) = sol.x_hat[k].iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::NonPositiveWealth { value: v, step: k, scenario: i });
        }
        let sd = market.sigma0(s, s, z);
        let s0 = market.sigma0(0.0, s, z);
        diagonal.push(sol.k_diag[k].iter().zip(&sol.x_hat[k]).map(|(kk, x)| kk / (sd * x)).collect());
        slice_zero.push(sol.k_zero[k].iter().zip(&sol.x_hat[k]).map(|(kk, x)| kk / (s0 * x)).collect());
    }
    Ok(PortfolioField { z, diagonal, slice_zero })
}

/// The wealth equation as Volterra coefficients: `b = b₀ u x`, `σ = σ₀ u x`.
pub struct WealthCoefficients<'a> {
    pub market: &'a MarketSpec,
}

impl VolterraCoefficients for WealthCoefficients<'_> {
    fn xi(&self, _t: f64, _z: f64) -> f64 {
        self.market.x0
    }
    fn b(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        self.market.b0(t, s, z) * u * x
    }
    fn sigma(&self, t: f64, s: f64, x: f64, u: f64, z: f64) -> f64 {
        self.market.sigma0(t, s, z) * u * x
    }
    fn db_dx(&self, t: f64, s: f64, _x: f64, u: f64, z: f64) -> f64 {
        self.market.b0(t, s, z) * u
    }
    fn db_du(&self, t: f64, s: f64, x: f64, _u: f64, z: f64) -> f64 {
        self.market.b0(t, s, z) * x
    }
    fn dsigma_dx(&self, t: f64, s: f64, _x: f64, u: f64, z: f64) -> f64 {
        self.market.sigma0(t, s, z) * u
    }
    fn dsigma_du(&self, t: f64, s: f64, x: f64, _u: f64, z: f64) -> f64 {
        self.market.sigma0(t, s, z) * x
    }
}

/// Wealth under a tabulated portfolio: the Euler solution of the wealth
/// equation and its exponential representation.
#[derive(Debug, Clone)]
pub struct WealthPaths {
    pub euler: StateField,
    /// `[s][k]`.
    pub exponential: Vec<Vec<f64>>,
    pub min_exponential: f64,
    /// Smallest `ln X`; finite exactly when the representation stays positive.
    pub min_log: f64,
    pub min_euler: f64,
    /// Euler iterates that are not positive.
    pub euler_non_positive: usize,
}

/// Euler solve of the wealth equation plus the representation
/// `X(t) = x₀ exp(∫σ₀π dB + ∫(b₀π − ½σ₀²π² + α/X) ds)`, where
/// `α(s) = ∫₀ˢ ∂_s b₀(s,r) π X dr + ∫₀ˢ ∂_s σ₀(s,r) π X dB(r)` is the history drift.
pub fn wealth_path(market: &MarketSpec, pi: &Tabulated, z: f64, paths: &DriverPaths, grid: &TimeGrid) -> Result<WealthPaths> {
    if pi.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("pi", "portfolio must be finite"));
    }
    let coeffs = WealthCoefficients { market };
    let euler = solve_forward(&coeffs, pi, z, paths, grid, None)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let history = market.kernels_time_dependent(grid, z);
    let dtb = |t: f64, s: f64| {
        let h = crate::svie::fd_step(t);
        (market.b0(t + h, s, z) - market.b0(t - h, s, z)) / (2.0 * h)
    };
    let dts = |t: f64, s: f64| {
        let h = crate::svie::fd_step(t);
        (market.sigma0(t + h, s, z) - market.sigma0(t - h, s, z)) / (2.0 * h)
    };
    let rows: Vec<(Vec<f64>, f64)> = (0..paths.n_scenarios())
        .into_par_iter()
        .map(|s| {
            let inc = paths.increments(s);
            let mut x = vec![market.x0];
            let mut lx = market.x0.ln();
            let mut lo = lx;
            for k in 0..n {
                let t = grid.t(k);
                let p = pi.values[s * n + k];
                let (b, sg) = (market.b0(t, t, z), market.sigma0(t, t, z));
                let mut drift = b * p - 0.5 * sg * sg * p * p;
                if history {
                    let alpha: f64 = (0..k)
                        .map(|j| {
                            let (r, pj) = (grid.t(j), pi.values[s * n + j]);
                            dtb(t, r) * pj * x[j] * dt + dts(t, r) * pj * x[j] * inc[j]
                        })
                        .sum();
                    drift += alpha / x[k];
                }
                lx += sg * p * inc[k] + drift * dt;
                lo = lo.min(lx);
                x.push(lx.exp());
            }
            (x, lo)
        })
        .collect();
    let min_log = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let exponential: Vec<Vec<f64>> = rows.into_iter().map(|r| r.0).collect();
    let min_exponential = exponential.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let euler_non_positive = (0..euler.n_scenarios()).map(|s| euler.path(s).iter().filter(|v| **v <= 0.0).count()).sum();
    Ok(WealthPaths { min_euler: euler.min(), euler, exponential, min_exponential, min_log, euler_non_positive })
}

/// Piecewise-linear interpolation of per-node values at each scenario's
/// realized signal, clamped to the end nodes.
pub fn interpolate_at_signal(z_nodes: &[f64], values: &[Vec<f64>], z_of_scenario: &[f64]) -> Vec<f64> {
    z_of_scenario
        .iter()
        .enumerate()
        .map(|(s, &z)| {
            let last = z_nodes.len() - 1;
            if z <= z_nodes[0] {
                return values[0][s];
            }
            if z >= z_nodes[last] {
                return values[last][s];
            }
            let i = z_nodes.partition_point(|&n| n <= z).min(last) - 1;
            let w = (z - z_nodes[i]) / (z_nodes[i + 1] - z_nodes[i]);
            (1.0 - w) * values[i][s] + w * values[i + 1][s]
        })
        .collect()
}

/// Interpolation of a scalar per node (e.g. `c(z)`).
pub fn interpolate_scalar(z_nodes: &[f64], values: &[f64], z: f64) -> f64 {
    let cols: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
    interpolate_at_signal(z_nodes, &cols, &[z])[0]
}

/// Budget-consistent solution at one `z` node.
#[derive(Debug, Clone)]
pub struct NodeSolution {
    pub z: f64,
    pub c: f64,
    pub terminal: Vec<f64>,
    pub bsvie: BsvieSolution,
    pub budget_residual: f64,
    pub fields: MartingaleFields,
}

impl NodeSolution {
    /// `π̂` at this node; fails where `X̂ ≤ 0`.
    pub fn portfolio(&self, market: &MarketSpec, grid: &TimeGrid) -> Result<PortfolioField> {
        optimal_portfolio(market, &self.bsvie, self.z, grid)
    }

    /// Weights `M(T,z)/M(0,z)` of the conditional law given `Z = z`.
    pub fn bridge_weights(&self) -> Vec<f64> {
        let n = self.fields.m_direct.len() - 1;
        self.fields.m_direct[n].iter().zip(&self.fields.m_direct[0]).map(|(t, o)| t / o).collect()
    }
}

/// `c` and `(X̂, K̂)` at one `z`.
pub fn solve_node(
    market: &MarketSpec,
    field: &DonskerField,
    paths: &DriverPaths,
    grid: &TimeGrid,
    z: f64,
    spec: &RegressionSpec,
    bracket: (f64, f64),
) -> Result<NodeSolution> {
    let fields = martingale_fields(market, field, paths, grid, z)?;
    let table = field.table(z, paths.n_scenarios(), grid.n_points())?;
    let cache = BsvieCache::new(market, &table, field, paths, grid, spec)?;
    let (c, terminal, sol) = solve_c(market, &fields, &cache, grid, bracket)?;
    let bsvie = sol.ok_or_else(|| Error::Regression("backward solve missing".into()))?;
    let budget_residual = budget_gap(market, &terminal, Some(&bsvie), z, grid);
    Ok(NodeSolution { z, c, terminal, bsvie, budget_residual, fields })
}

/// Relative RMS error `√(Σ w (a − b)²) / √(Σ w b²)` with scenario weights
/// repeated across each row of a `[k][s]` field.
pub fn weighted_relative_rmse(estimate: &[Vec<f64>], truth: &[Vec<f64>], weights: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (e, t) in estimate.iter().zip(truth) {
        for ((a, b), w) in e.iter().zip(t).zip(weights) {
            num += w * (a - b).powi(2);
            den += w * b * b;
        }
    }
    (num / den).sqrt()
}

/// `F(c(Z))` evaluated at each scenario's own `Z = Z(T₀)`, with `c`
/// interpolated on the node grid.
pub fn terminal_wealth_at_signal(
    market: &MarketSpec,
    field: &DonskerField,
    paths: &DriverPaths,
    grid: &TimeGrid,
    z_nodes: &[f64],
    c_nodes: &[f64],
) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let z_real = field.signal().terminal().to_vec();
    let t_max = grid.t_max();
    let theta: Vec<f64> = (0..n).map(|k| theta0(market, grid.t(k), 0.0, t_max)).collect::<Result<_>>()?;
    (0..paths.n_scenarios())
        .into_par_iter()
        .map(|s| {
            let z = z_real[s];
            let inc = paths.increments(s);
            let ly: f64 = (0..n).map(|k| theta[k] * inc[k] - 0.5 * theta[k] * theta[k] * grid.dt()).sum();
            let m0 = field.conditional_density(0, z, s)?;
            let mt = field.conditional_density(n, z, s)?;
            let c = interpolate_scalar(z_nodes, c_nodes, z);
            Ok(market.utility.inv_du(c * ly.exp() * m0 / mt))
        })
        .collect()
}

/// Settings of the portfolio pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioOptions {
    /// Basis of the backward Volterra regression; the weight is always
    /// `M^κ` with `κ` from the utility.
    pub regression: RegressionSpec,
    pub bracket: (f64, f64),
}

impl Default for PortfolioOptions {
    fn default() -> Self {
        PortfolioOptions { regression: RegressionSpec::default().with_degree(2), bracket: (1e-6, 1e6) }
    }
}

/// The pipeline over a `z` grid, aggregated at each scenario's realized `Z`.
#[derive(Debug, Clone)]
pub struct PortfolioRun {
    pub z_nodes: Vec<f64>,
    pub nodes: Vec<NodeSolution>,
    /// `X̂(T)` at the realized signal.
    pub terminal_at_signal: Vec<f64>,
    /// `E[U(X̂(T))]`.
    pub insider_value: Estimate,
    /// `E[U(X(T))]` under the Merton fraction `b₀(s,s)/σ₀(s,s)²`.
    pub merton_value: Estimate,
    /// Paired difference of the two values.
    pub gain: Estimate,
    pub merton_wealth: WealthPaths,
}

impl PortfolioRun {
    pub fn c(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.c).collect()
    }
}

/// Solves every `z` node, then evaluates insider and Merton values on the same noise.
pub fn solve_portfolio(
    market: &MarketSpec,
    field: &DonskerField,
    paths: &DriverPaths,
    grid: &TimeGrid,
    z_nodes: &[f64],
    opts: &PortfolioOptions,
) -> Result<PortfolioRun> {
    market.validate_on(grid, z_nodes)?;
    let nodes = z_nodes
        .iter()
        .map(|&z| solve_node(market, field, paths, grid, z, &opts.regression, opts.bracket))
        .collect::<Result<Vec<_>>>()?;
    let c: Vec<f64> = nodes.iter().map(|n| n.c).collect();
    let terminal_at_signal = terminal_wealth_at_signal(market, field, paths, grid, z_nodes, &c)?;
    let n = grid.n_steps();
    let merton: Vec<f64> = (0..paths.n_scenarios())
        .flat_map(|_| (0..n).map(|k| {
            let t = grid.t(k);
            market.b0(t, t, 0.0) / market.sigma0(t, t, 0.0).powi(2)
        }))
        .collect();
    let merton_wealth = wealth_path(market, &Tabulated { n_steps: n, values: merton }, 0.0, paths, grid)?;
    let u = market.utility;
    let insider: Vec<f64> = terminal_at_signal.iter().map(|&x| u.u(x)).collect();
    let bench: Vec<f64> = merton_wealth.exponential.iter().map(|p| u.u(p[n])).collect();
    let diff: Vec<f64> = insider.iter().zip(&bench).map(|(a, b)| a - b).collect();
    Ok(PortfolioRun {
        z_nodes: z_nodes.to_vec(),
        nodes,
        terminal_at_signal,
        insider_value: Estimate::from_samples(&insider),
        merton_value: Estimate::from_samples(&bench),
        gain: Estimate::from_samples(&diff),
        merton_wealth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utility_inverse_marginal() {
        let p = Utility::Power { gamma: 0.5 };
        assert!((p.inv_du(0.25) - 16.0).abs() < 1e-12);
        assert!((Utility::Log.inv_du(4.0) - 0.25).abs() < 1e-15);
        for x in [0.3, 1.0, 7.0] {
            assert!((p.inv_du(p.du(x)) - x).abs() < 1e-12);
        }
        assert_eq!(p.donsker_exponent(), 2.0);
        assert!(Utility::Power { gamma: 1.5 }.validate().is_err());
    }

    #[test]
    fn theta_arithmetic() {
        let m = MarketSpec::constant(0.1, 0.2, 1.0, Utility::Log).unwrap();
        assert!((theta0(&m, 0.3, 0.0, 1.0).unwrap() + 0.5).abs() < 1e-15);
        let zero = MarketSpec::constant(0.0, 0.2, 1.0, Utility::Log).unwrap();
        assert_eq!(theta0(&zero, 0.3, 0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn theta_exponential_kernel() {
        let (mu, sig) = (0.2, 0.4);
        let m = MarketSpec::new(move |t, s, _| mu * (t - s).exp(), move |_, _, _| sig, 0.1, 1.0, Utility::Log).unwrap();
        for t in [0.0, 0.25, 0.5] {
            let expect = -mu * (1.0f64 - t).exp() / sig;
            assert!((theta0(&m, t, 0.0, 1.0).unwrap() - expect).abs() < 1e-14);
        }
        let g = TimeGrid::new(1.0, 2.0, 8).unwrap();
        assert!(m.ratio_time_dependent(&g, 0.0));
    }

    #[test]
    fn volatility_floor_enforced() {
        let m = MarketSpec::new(|_, _, _| 0.0, |t, _, _| 0.5 - t, 0.1, 1.0, Utility::Log).unwrap();
        assert!(theta0(&m, 0.0, 0.0, 1.0).is_err());
        let g = TimeGrid::new(1.0, 2.0, 8).unwrap();
        assert!(m.validate_on(&g, &[0.0]).is_err());
        assert!(MarketSpec::constant(0.1, 0.2, -1.0, Utility::Log).is_err());
    }

    #[test]
    fn interpolation_at_signal() {
        let nodes = [-1.0, 0.0, 1.0];
        let vals = vec![vec![1.0, 1.0], vec![3.0, 3.0], vec![5.0, 5.0]];
        assert_eq!(interpolate_at_signal(&nodes, &vals, &[0.5, -3.0]), vec![4.0, 1.0]);
        assert_eq!(interpolate_scalar(&nodes, &[2.0, 4.0, 8.0], 1.0), 8.0);
    }
}
