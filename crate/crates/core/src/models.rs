//! Test models with hand-computable answers, shared by the validation
//! battery, the examples and the CLI presets.

use crate::adjoint::FnPerformance;
use crate::svie::{Constant, Control, ControlSet, FnCoefficients, FnControl, Observation};

/// Coefficients, performance functional and control set of one problem.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: &'static str,
    pub coeffs: FnCoefficients,
    pub perf: FnPerformance,
    pub control_set: ControlSet,
}

/// `dX = u dt`, `f = −u²`, `g = x`, started at 0. The Hamiltonian
/// `−u² M + u p` with `p = E[M(T) | F_t] = M(t)` peaks at `u = ½`.
pub fn lq() -> Model {
    Model {
        name: "lq",
        coeffs: FnCoefficients::new(|_, _| 0.0, |_, _, _, u, _| u, |_, _, _, _, _| 0.0),
        perf: FnPerformance::new(|_, _, u, _| -u * u, |x, _| x).with_dg_dx(|_, _| 1.0),
        control_set: ControlSet { lo: -1.5, hi: 2.5 },
    }
}

/// Analytic optimum of [`lq`].
pub const LQ_OPTIMUM: f64 = 0.5;

/// State-dependent drift and volatility, concave rewards.
pub fn nonlinear() -> Model {
    Model {
        name: "nonlinear",
        coeffs: FnCoefficients::new(
            |_, _| 0.5,
            |_, _, x, u, _| -0.5 * x.sin() + u,
            |_, _, x, u, _| 0.2 * (1.0 + 0.3 * x.cos()) + 0.1 * u,
        ),
        perf: FnPerformance::new(|_, x, u, _| -0.5 * u * u - 0.1 * x * x, |x, _| -(x - 1.0).powi(2)),
        control_set: ControlSet { lo: -2.0, hi: 2.0 },
    }
}

/// Kernels decaying in `t − s`, so the future-kernel Hamiltonian is active.
pub fn time_dependent() -> Model {
    Model {
        name: "time_dependent",
        coeffs: FnCoefficients::new(
            |_, _| 0.0,
            |t, s, x, u, _| (-(t - s)).exp() * (u - 0.3 * x),
            |t, s, _, u, _| 0.2 * (-0.5 * (t - s)).exp() * (1.0 + 0.5 * u),
        ),
        perf: FnPerformance::new(|_, _, u, _| -u * u, |x, _| -(x - 0.5).powi(2)),
        control_set: ControlSet { lo: -2.0, hi: 2.0 },
    }
}

/// Coefficients free of `x`, `f ≡ 0`, `g = c·x`. The adjoint is
/// `p(t, z) = c·M(t, z)` with `q = c·E[D_t δ_Z(z) | F_t]`.
pub fn x_free(c: f64) -> Model {
    Model {
        name: "x_free",
        coeffs: FnCoefficients::new(
            |_, _| 1.0,
            |t, s, _, u, _| (1.0 + 0.5 * (t - s)) * u,
            |t, s, _, u, _| 0.3 + 0.2 * u * (t - s).cos(),
        ),
        perf: FnPerformance::new(|_, _, _, _| 0.0, move |x, _| c * x).with_dg_dx(move |_, _| c),
        control_set: ControlSet { lo: -2.0, hi: 2.0 },
    }
}

/// Log-wealth `Y = ln X` of a market with constant `b₀`, `σ₀` under the
/// fraction `u`: `dY = (b₀u − ½σ₀²u²) dt + σ₀u dB`, `g(y) = y` (log utility).
pub fn log_wealth(b0: f64, sigma0: f64, x0: f64) -> Model {
    let s2 = sigma0 * sigma0;
    Model {
        name: "log_wealth",
        coeffs: FnCoefficients::new(
            move |_, _| x0.ln(),
            move |_, _, _, u, _| b0 * u - 0.5 * s2 * u * u,
            move |_, _, _, u, _| sigma0 * u,
        ),
        perf: FnPerformance::new(|_, _, _, _| 0.0, |y, _| y).with_dg_dx(|_, _| 1.0),
        control_set: ControlSet { lo: -20.0, hi: 20.0 },
    }
}

/// Constants on an evenly spaced grid of `𝕌`.
pub fn constant_family(set: &ControlSet, n: usize) -> Vec<Box<dyn Control + Send>> {
    set.grid(n).into_iter().map(|u| Box::new(Constant(u)) as Box<dyn Control + Send>).collect()
}

/// `π_κ(t) = b₀/σ₀² + κ (z − B(t)) / (σ₀ (T₀ − t))` for a signal `Z = B(T₀)`.
/// `κ = 1` is the insider log-optimal fraction, `κ = 0` the Merton fraction.
pub fn insider_fraction(b0: f64, sigma0: f64, t0: f64, kappa: f64) -> impl Control + Send {
    FnControl(move |o: &Observation| b0 / (sigma0 * sigma0) + kappa * (o.z - o.b) / (sigma0 * (t0 - o.t)))
}

pub fn insider_family(b0: f64, sigma0: f64, t0: f64, kappas: &[f64]) -> Vec<Box<dyn Control + Send>> {
    kappas.iter().map(|&k| Box::new(insider_fraction(b0, sigma0, t0, k)) as Box<dyn Control + Send>).collect()
}

/// Analytic insider log-optimal fraction.
pub fn insider_fraction_exact(b0: f64, sigma0: f64, t0: f64, t: f64, z: f64, b: f64) -> f64 {
    b0 / (sigma0 * sigma0) + (z - b) / (sigma0 * (t0 - t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::PerformanceSpec;
    use crate::svie::{has_time_dependent_kernels, is_x_free, VolterraCoefficients};

    #[test]
    fn probes_match_model_shapes() {
        assert!(is_x_free(&x_free(1.0).coeffs, 0.0, &[]));
        assert!(!is_x_free(&nonlinear().coeffs, 0.0, &[]));
        assert!(has_time_dependent_kernels(&time_dependent().coeffs, 0.0, &[]));
        assert!(!has_time_dependent_kernels(&lq().coeffs, 0.0, &[]));
    }

    #[test]
    fn insider_fraction_reduces_to_merton() {
        let obs = Observation { k: 0, t: 0.2, z: 1.0, scenario: 0, x: 1.0, b: 0.3, signal: None };
        assert!((insider_fraction(0.1, 0.5, 1.0, 0.0).value(&obs) - 0.4).abs() < 1e-15);
        let full = insider_fraction(0.1, 0.5, 1.0, 1.0).value(&obs);
        assert!((full - insider_fraction_exact(0.1, 0.5, 1.0, 0.2, 1.0, 0.3)).abs() < 1e-15);
    }

    #[test]
    fn log_wealth_starts_at_log_x0() {
        let m = log_wealth(0.1, 0.2, 2.0);
        assert!((m.coeffs.xi(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(m.perf.dg_dx(3.0, 0.0), 1.0);
    }
}
