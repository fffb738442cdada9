//! Conditional Donsker-delta field `M(t, z) = E[δ_Z(z) | F_t]` and its
//! Hida–Malliavin traces for a first-order chaos signal.
//!
//! All three quantities are real parts of one Fourier integral
//!
//! ```text
//! (1/2π) ∫ exp[ix(Z(t) − z) + Ψ_t(x) − ½x² V_B(t)] · m(x) dx
//! ```
//!
//! with multiplier `m = 1` (density), `ixβ(t)` (Brownian trace) or
//! `e^{ixψ(t,ζ)} − 1` (jump trace). `Ψ_t` is the jump exponent over
//! `[t, T₀]`. The integral is a truncated trapezoid rule; when the signal has
//! no jump part the Gaussian closed form is used instead.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::chaos::{ChaosSpec, SignalPaths};
use crate::paths::{LevyModel, TimeGrid};
use crate::{Error, Result};

/// Densities below this are treated as the far tail when forming `Φ`.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Largest tolerated imaginary part of a quadrature value.
pub const IMAGINARY_RESIDUE_TOL: f64 = 1e-8;

/// Discretization of the `dx` integral and of the `z` window.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    /// Fixed cutoff; `None` derives it from the Gaussian envelope.
    pub x_cutoff: Option<f64>,
    pub n_nodes: usize,
    /// Envelope `exp(−x²V_B/2)` value at the derived cutoff.
    pub envelope: f64,
    pub z_window: (f64, f64),
    pub z_nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { x_cutoff: None, n_nodes: 2048, envelope: 1e-12, z_window: (-8.0, 8.0), z_nodes: 400 }
    }
}

impl QuadratureSpec {
    fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 || self.n_nodes % 2 != 0 {
            return Err(Error::param("n_nodes", format!("must be even and >= 2, got {}", self.n_nodes)));
        }
        if !(self.envelope > 0.0 && self.envelope < 1.0) {
            return Err(Error::param("envelope", "must lie in (0, 1)"));
        }
        if let Some(c) = self.x_cutoff {
            if !(c > 0.0) {
                return Err(Error::param("x_cutoff", "must be positive"));
            }
        }
        Ok(())
    }

    /// Cutoff `X` with `exp(−X² v / 2) = envelope`.
    pub fn cutoff(&self, v: f64) -> f64 {
        self.x_cutoff.unwrap_or_else(|| (-2.0 * self.envelope.ln() / v).sqrt())
    }

    pub fn z_grid(&self) -> Vec<f64> {
        crate::stats::linspace(self.z_window.0, self.z_window.1, self.z_nodes)
    }
}

/// Precomputed Fourier weights at one time `t`.
#[derive(Debug, Clone)]
struct Kernel {
    x0: f64,
    h: f64,
    /// `trapezoid weight · exp(Ψ_t(x) − ½x²V_B) / 2π` at `x_j = x0 + j h`.
    weights: Vec<Complex64>,
}

impl Kernel {
    fn build(spec: &ChaosSpec, levy: &LevyModel, t: f64, vb: f64, quad: &QuadratureSpec, lattice: f64) -> Self {
        let cutoff = quad.cutoff(vb);
        let n = quad.n_nodes;
        let h = 2.0 * cutoff / n as f64;
        let x0 = -cutoff;
        let weights = (0..=n)
            .map(|j| {
                let x = x0 + j as f64 * h;
                let tw = if j == 0 || j == n { 0.5 } else { 1.0 };
                let expo = spec.jump_exponent(levy, t, x, lattice) - Complex64::new(0.5 * x * x * vb, 0.0);
                expo.exp() * (tw * h / (2.0 * PI))
            })
            .collect();
        Kernel { x0, h, weights }
    }

    /// `Σ_j w_j m(x_j) e^{i x_j d}`.
    fn sum(&self, d: f64, mult: impl Fn(f64) -> Complex64) -> Complex64 {
        const REANCHOR: usize = 64;
        let step = Complex64::from_polar(1.0, self.h * d);
        let mut acc = Complex64::new(0.0, 0.0);
        let mut phase = Complex64::new(1.0, 0.0);
        for (j, w) in self.weights.iter().enumerate() {
            let x = self.x0 + j as f64 * self.h;
            if j % REANCHOR == 0 {
                phase = Complex64::from_polar(1.0, x * d);
            }
            acc += w * mult(x) * phase;
            phase *= step;
        }
        acc
    }
}

/// `M`, `M_B`, `M_N` and `Φ` over scenarios for the grid times `t_k < T₀`.
pub struct DonskerField {
    spec: ChaosSpec,
    levy: LevyModel,
    signal: SignalPaths,
    grid: TimeGrid,
    quad: QuadratureSpec,
    gaussian: bool,
    /// `(V_B, V_N)` at each grid point.
    remaining: Vec<(f64, f64)>,
    /// Index of the last grid time strictly before `T₀`.
    last_valid: usize,
    kernels: Vec<Option<Kernel>>,
}

impl std::fmt::Debug for DonskerField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DonskerField")
            .field("gaussian", &self.gaussian)
            .field("last_valid", &self.last_valid)
            .finish_non_exhaustive()
    }
}

impl DonskerField {
    pub fn new(spec: ChaosSpec, levy: LevyModel, signal: SignalPaths, grid: TimeGrid, quad: QuadratureSpec) -> Result<Self> {
        quad.validate()?;
        let t0 = spec.horizon();
        let remaining = (0..grid.n_points())
            .map(|k| {
                let t = grid.t(k);
                if t < t0 {
                    spec.remaining_variance(&levy, t, grid.dt())
                } else {
                    Ok((0.0, 0.0))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let valid: Vec<usize> = (0..grid.n_points()).filter(|&k| grid.t(k) < t0 - 1e-12 && remaining[k].0 > 0.0).collect();
        let last_valid = *valid.last().ok_or(Error::Degenerate { t: 0.0, horizon: t0 })?;
        let gaussian = spec.is_gaussian(&levy);
        let kernels: Vec<Option<Kernel>> = (0..grid.n_points())
            .into_par_iter()
            .map(|k| {
                (!gaussian && k <= last_valid)
                    .then(|| Kernel::build(&spec, &levy, grid.t(k), remaining[k].0, &quad, grid.dt()))
            })
            .collect();
        Ok(DonskerField { spec, levy, signal, grid, quad, gaussian, remaining, last_valid, kernels })
    }

    pub fn spec(&self) -> &ChaosSpec {
        &self.spec
    }

    pub fn levy(&self) -> &LevyModel {
        &self.levy
    }

    pub fn signal(&self) -> &SignalPaths {
        &self.signal
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn quadrature(&self) -> &QuadratureSpec {
        &self.quad
    }

    pub fn is_gaussian(&self) -> bool {
        self.gaussian
    }

    /// Largest grid index at which the field is defined.
    pub fn last_valid_index(&self) -> usize {
        self.last_valid
    }

    /// `(V_B(t_k), V_N(t_k))`.
    pub fn remaining_variance(&self, k: usize) -> (f64, f64) {
        self.remaining[k]
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.last_valid {
            return Err(Error::Degenerate { t: self.grid.t(k), horizon: self.spec.horizon() });
        }
        Ok(())
    }

    fn kernel(&self, k: usize) -> Cow<'_, Kernel> {
        match &self.kernels[k] {
            Some(kern) => Cow::Borrowed(kern),
            None => Cow::Owned(Kernel::build(&self.spec, &self.levy, self.grid.t(k), self.remaining[k].0, &self.quad, self.grid.dt())),
        }
    }

    fn healthy(value: Complex64) -> Result<f64> {
        if value.im.abs() > IMAGINARY_RESIDUE_TOL {
            return Err(Error::Quadrature { residue: value.im });
        }
        Ok(value.re)
    }

    /// Gaussian closed form `φ((z − Z)/√V)/√V`.
    pub fn density_closed_form(&self, k: usize, z: f64, s: usize) -> Result<f64> {
        self.check(k)?;
        Ok(gaussian_density(z - self.signal.value(s, k), self.remaining[k].0))
    }

    /// The Fourier quadrature, bypassing the Gaussian fast path.
    pub fn density_quadrature(&self, k: usize, z: f64, s: usize) -> Result<f64> {
        self.check(k)?;
        let kern = self.kernel(k);
        let v = Self::healthy(kern.sum(self.signal.value(s, k) - z, |_| Complex64::new(1.0, 0.0)))?;
        Ok(v.max(0.0))
    }

    /// `M(t_k, z)` on scenario `s`, clamped at zero.
    pub fn conditional_density(&self, k: usize, z: f64, s: usize) -> Result<f64> {
        if self.gaussian {
            self.density_closed_form(k, z, s)
        } else {
            self.density_quadrature(k, z, s)
        }
    }

    /// `E[D_t δ_Z(z) | F_t]` at `t_k`.
    pub fn conditional_derivative_b(&self, k: usize, z: f64, s: usize) -> Result<f64> {
        self.check(k)?;
        let beta = self.spec.beta(self.grid.t(k));
        let d = self.signal.value(s, k) - z;
        if self.gaussian {
            let v = self.remaining[k].0;
            return Ok(beta * (-d) / v * gaussian_density(d, v));
        }
        let kern = self.kernel(k);
        Self::healthy(kern.sum(d, |x| Complex64::new(0.0, x * beta)))
    }

    /// Quadrature version of the Brownian trace, bypassing the fast path.
    pub fn derivative_b_quadrature(&self, k: usize, z: f64, s: usize) -> Result<f64> {
        self.check(k)?;
        let beta = self.spec.beta(self.grid.t(k));
        let kern = self.kernel(k);
        Self::healthy(kern.sum(self.signal.value(s, k) - z, |x| Complex64::new(0.0, x * beta)))
    }

    /// `E[D_{t,ζ} δ_Z(z) | F_t]` at `t_k` for a mark `ζ` of the Lévy measure.
    pub fn conditional_derivative_n(&self, k: usize, z: f64, zeta: f64, s: usize) -> Result<f64> {
        if self.levy.mark_index(zeta).is_none() {
            return Err(Error::UnknownMark { mark: zeta });
        }
        self.check(k)?;
        let shift = self.spec.psi(self.grid.t(k), zeta);
        if shift == 0.0 {
            return Ok(0.0);
        }
        let d = self.signal.value(s, k) - z;
        if self.gaussian {
            let v = self.remaining[k].0;
            return Ok(gaussian_density(d + shift, v) - gaussian_density(d, v));
        }
        let kern = self.kernel(k);
        Self::healthy(kern.sum(d, |x| Complex64::from_polar(1.0, x * shift) - 1.0))
    }

    /// `Φ = E[D_t δ | F_t] / E[δ | F_t]`.
    pub fn phi_ratio(&self, k: usize, z: f64, s: usize) -> Result<f64> {
        let m = self.conditional_density(k, z, s)?;
        if m <= DENSITY_FLOOR {
            return Err(Error::FarTail { z, value: m });
        }
        if self.gaussian {
            let v = self.remaining[k].0;
            return Ok(self.spec.beta(self.grid.t(k)) * (z - self.signal.value(s, k)) / v);
        }
        Ok(self.conditional_derivative_b(k, z, s)? / m)
    }

    /// Unconditional density of `Z(T₀)` at `z` (the field at `t = 0`).
    pub fn unconditional_density(&self, z: f64) -> Result<f64> {
        self.conditional_density(0, z, 0)
    }

    /// Trapezoid `∫ M(t_k, z) dz` over the quadrature `z` window.
    pub fn integrate_density(&self, k: usize, s: usize, g: impl Fn(f64) -> f64) -> Result<f64> {
        let zs = self.quad.z_grid();
        let h = zs[1] - zs[0];
        let vals = zs.iter().map(|&z| Ok(g(z) * self.conditional_density(k, z, s)?)).collect::<Result<Vec<_>>>()?;
        Ok(crate::stats::trapezoid(&vals, h))
    }
}

pub fn gaussian_density(d: f64, v: f64) -> f64 {
    (-0.5 * d * d / v).exp() / (2.0 * PI * v).sqrt()
}

/// `M`, `M_B`, `Φ` and the jump traces for one `z`, laid out `[s][k]`.
#[derive(Debug, Clone)]
pub struct DonskerTable {
    pub z: f64,
    informed: bool,
    n_points: usize,
    n_marks: usize,
    m: Vec<f64>,
    m_b: Vec<f64>,
    phi: Vec<f64>,
    m_n: Vec<f64>,
}

impl DonskerTable {
    /// `M ≡ 1`, all traces zero: the non-insider reduction.
    pub fn uninformed(z: f64, n_scenarios: usize, n_points: usize, n_marks: usize) -> Self {
        DonskerTable {
            z,
            informed: false,
            n_points,
            n_marks,
            m: vec![1.0; n_scenarios * n_points],
            m_b: vec![0.0; n_scenarios * n_points],
            phi: vec![0.0; n_scenarios * n_points],
            m_n: vec![0.0; n_scenarios * n_points * n_marks],
        }
    }

    pub fn m(&self, s: usize, k: usize) -> f64 {
        self.m[s * self.n_points + k]
    }

    pub fn m_b(&self, s: usize, k: usize) -> f64 {
        self.m_b[s * self.n_points + k]
    }

    /// `Φ`; `NaN` where the density is below [`DENSITY_FLOOR`].
    pub fn phi(&self, s: usize, k: usize) -> f64 {
        self.phi[s * self.n_points + k]
    }

    pub fn m_n(&self, s: usize, k: usize, mark: usize) -> f64 {
        self.m_n[(s * self.n_points + k) * self.n_marks + mark]
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// False for the `M ≡ 1` table.
    pub fn is_informed(&self) -> bool {
        self.informed
    }

    /// `M(t_k, z)` across scenarios.
    pub fn m_slice(&self, k: usize) -> Vec<f64> {
        (0..self.m.len() / self.n_points).map(|s| self.m(s, k)).collect()
    }
}

/// Source of the conditional density field seen by the control solvers.
pub trait InformationField: Sync {
    /// Field values at every grid point `0..n_points` for parameter `z`.
    fn table(&self, z: f64, n_scenarios: usize, n_points: usize) -> Result<DonskerTable>;

    /// The signal driving the field, if any.
    fn signal_paths(&self) -> Option<&SignalPaths>;
}

/// No inside information: `M ≡ 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uninformed {
    pub n_marks: usize,
}

impl InformationField for Uninformed {
    fn table(&self, z: f64, n_scenarios: usize, n_points: usize) -> Result<DonskerTable> {
        Ok(DonskerTable::uninformed(z, n_scenarios, n_points, self.n_marks))
    }

    fn signal_paths(&self) -> Option<&SignalPaths> {
        None
    }
}

impl InformationField for DonskerField {
    fn table(&self, z: f64, n_scenarios: usize, n_points: usize) -> Result<DonskerTable> {
        if n_points > self.grid.n_points() || n_scenarios > self.signal.n_scenarios() {
            return Err(Error::param("table", "request exceeds the field's grid or scenario count"));
        }
        if n_points > self.last_valid + 1 {
            return Err(Error::Degenerate { t: self.grid.t(n_points - 1), horizon: self.spec.horizon() });
        }
        let n_marks = self.levy.marks().len();
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_scenarios)
            .into_par_iter()
            .map(|s| {
                let mut m = Vec::with_capacity(n_points);
                let mut mb = Vec::with_capacity(n_points);
                let mut phi = Vec::with_capacity(n_points);
                let mut mn = Vec::with_capacity(n_points * n_marks);
                for k in 0..n_points {
                    let mk = self.conditional_density(k, z, s)?;
                    let bk = self.conditional_derivative_b(k, z, s)?;
                    m.push(mk);
                    mb.push(bk);
                    phi.push(if self.gaussian {
                        self.spec.beta(self.grid.t(k)) * (z - self.signal.value(s, k)) / self.remaining[k].0
                    } else if mk > DENSITY_FLOOR {
                        bk / mk
                    } else {
                        f64::NAN
                    });
                    for mark in self.levy.marks() {
                        mn.push(self.conditional_derivative_n(k, z, mark.size, s)?);
                    }
                }
                Ok((m, mb, phi, mn))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = DonskerTable { z, informed: true, n_points, n_marks, m: vec![], m_b: vec![], phi: vec![], m_n: vec![] };
        for (m, mb, phi, mn) in rows {
            t.m.extend(m);
            t.m_b.extend(mb);
            t.phi.extend(phi);
            t.m_n.extend(mn);
        }
        Ok(t)
    }

    fn signal_paths(&self) -> Option<&SignalPaths> {
        Some(&self.signal)
    }
}

/// CSV `(scenario, t, z, M, M_B, Phi)` for the given scenarios and `z` nodes
/// at every grid time where the field is defined.
pub fn write_field_csv(
    out: &mut impl Write,
    field: &DonskerField,
    scenarios: &[usize],
    z_nodes: &[f64],
    config_hash: &str,
) -> Result<()> {
    writeln!(out, "# config-hash: {config_hash}")?;
    writeln!(out, "scenario,t,z,M,M_B,Phi")?;
    for &s in scenarios {
        for k in 0..=field.last_valid_index() {
            for &z in z_nodes {
                let m = field.conditional_density(k, z, s)?;
                let mb = field.conditional_derivative_b(k, z, s)?;
                let phi = if m > DENSITY_FLOOR { mb / m } else { f64::NAN };
                writeln!(out, "{s},{},{z},{m:e},{mb:e},{phi:e}", field.grid().t(k))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::simulate_signal;
    use crate::paths::sample_driver;

    fn gaussian_field(n: usize) -> DonskerField {
        let grid = TimeGrid::new(0.5, 1.0, 20).unwrap();
        let levy = LevyModel::none();
        let paths = sample_driver(&grid, &levy, n, 5).unwrap();
        let spec = ChaosSpec::brownian(1.0).unwrap();
        let sig = simulate_signal(&spec, &paths, &grid).unwrap();
        DonskerField::new(spec, levy, sig, grid, QuadratureSpec::default()).unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let f = gaussian_field(2);
        let m = f.conditional_density(0, 0.0, 0).unwrap();
        assert!((m - 0.398942280401).abs() < 1e-9);
        let q = f.density_quadrature(0, 0.0, 0).unwrap();
        assert!((q - 0.398942280401).abs() < 1e-9);
    }

    #[test]
    fn brownian_trace_at_unit_offset() {
        let f = gaussian_field(1);
        // β = 1, V = 1, Z(0) = 0, z = 1: φ(1) = 0.241971
        let d = f.conditional_derivative_b(0, 1.0, 0).unwrap();
        assert!((d - 0.2419707245).abs() < 1e-9);
        let q = f.derivative_b_quadrature(0, 1.0, 0).unwrap();
        assert!((q - d).abs() < 1e-10);
    }

    #[test]
    fn mode_and_phi_at_signal() {
        let f = gaussian_field(3);
        let k = 10;
        let zc = f.signal().value(1, k);
        let at = f.conditional_density(k, zc, 1).unwrap();
        for dz in [-0.2, -0.01, 0.01, 0.3] {
            assert!(f.conditional_density(k, zc + dz, 1).unwrap() < at);
        }
        assert_eq!(f.conditional_derivative_b(k, zc, 1).unwrap(), 0.0);
        assert_eq!(f.phi_ratio(k, zc, 1).unwrap(), 0.0);
        assert!(f.conditional_derivative_b(k, zc + 0.5, 1).unwrap() > 0.0);
    }

    #[test]
    fn phi_closed_form() {
        let f = gaussian_field(2);
        // t = 0.5 is index 20; field ends before T0 = 1 so index 20 is valid.
        let k = 20;
        let z = f.signal().value(0, k) + 0.25;
        assert!((f.phi_ratio(k, z, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn far_tail_rejected() {
        let f = gaussian_field(1);
        assert!(matches!(f.phi_ratio(20, 40.0, 0), Err(Error::FarTail { .. })));
    }

    #[test]
    fn degenerate_at_horizon() {
        let grid = TimeGrid::new(1.0, 1.0, 8).unwrap();
        let levy = LevyModel::none();
        let paths = sample_driver(&grid, &levy, 2, 5).unwrap();
        let spec = ChaosSpec::brownian(1.0).unwrap();
        let sig = simulate_signal(&spec, &paths, &grid).unwrap();
        let f = DonskerField::new(spec, levy, sig, grid, QuadratureSpec::default()).unwrap();
        assert_eq!(f.last_valid_index(), 7);
        assert!(matches!(f.conditional_density(8, 0.0, 0), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn jump_trace_vanishes_without_psi() {
        let grid = TimeGrid::new(0.5, 1.0, 8).unwrap();
        let levy = LevyModel::single(1.0, 1.0).unwrap();
        let paths = sample_driver(&grid, &levy, 2, 5).unwrap();
        let spec = ChaosSpec::brownian(1.0).unwrap();
        let sig = simulate_signal(&spec, &paths, &grid).unwrap();
        let f = DonskerField::new(spec, levy, sig, grid, QuadratureSpec::default()).unwrap();
        assert_eq!(f.conditional_derivative_n(3, 0.2, 1.0, 0).unwrap(), 0.0);
        assert!(matches!(f.conditional_derivative_n(3, 0.2, 2.0, 0), Err(Error::UnknownMark { .. })));
    }

    #[test]
    fn rejects_odd_node_count() {
        let q = QuadratureSpec { n_nodes: 7, ..Default::default() };
        assert!(q.validate().is_err());
    }
}
