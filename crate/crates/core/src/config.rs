//! Experiment configuration: a JSON document whose functions are picked from
//! named presets with numeric parameters.
//!
//! ```json
//! {
//!   "name": "gaussian_lq",
//!   "grid": { "T": 1.0, "T0": 1.5, "N": 32 },
//!   "monte_carlo": { "n_scenarios": 2000, "seed": 7 },
//!   "model": { "preset": "lq" },
//!   "control": { "preset": "constant", "value": 0.5 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chaos::ChaosSpec;
use crate::donsker::QuadratureSpec;
use crate::models::{self, Model};
use crate::paths::{LevyModel, Mark, TimeGrid};
use crate::portfolio::{MarketSpec, Utility};
use crate::regression::RegressionSpec;
use crate::stats::linspace;
use crate::svie::{Constant, Control, PiecewiseConstant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Names the output subdirectory.
    pub name: String,
    pub grid: GridConfig,
    #[serde(default)]
    pub levy: LevyConfig,
    #[serde(default)]
    pub chaos: ChaosConfig,
    #[serde(default)]
    pub market: Option<MarketConfig>,
    #[serde(default)]
    pub model: ModelPreset,
    #[serde(default)]
    pub control: ControlPreset,
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub z_grid: ZGrid,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub regression: Option<RegressionSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub export: ExportConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyConfig {
    pub intensity: f64,
    #[serde(default)]
    pub marks: Vec<MarkConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkConfig {
    pub size: f64,
    pub prob: f64,
}

/// Deterministic `β(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFunction {
    Constant { value: f64 },
    /// `a + b t`.
    Linear { a: f64, b: f64 },
    /// `Σ cᵢ tⁱ`.
    Polynomial { coeffs: Vec<f64> },
    /// `a e^{rate t}`.
    Exponential { a: f64, rate: f64 },
}

impl TimeFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant { value } => *value,
            TimeFunction::Linear { a, b } => a + b * t,
            TimeFunction::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
            TimeFunction::Exponential { a, rate } => a * (rate * t).exp(),
        }
    }
}

/// Deterministic `ψ(t, ζ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkFunction {
    #[default]
    Zero,
    Constant { value: f64 },
    /// `a ζ`.
    Proportional { a: f64 },
}

impl MarkFunction {
    pub fn eval(&self, zeta: f64) -> f64 {
        match *self {
            MarkFunction::Zero => 0.0,
            MarkFunction::Constant { value } => value,
            MarkFunction::Proportional { a } => a * zeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub beta: TimeFunction,
    #[serde(default)]
    pub psi: MarkFunction,
}

impl Default for ChaosConfig {
    fn default() -> Self {
        ChaosConfig { beta: TimeFunction::Constant { value: 1.0 }, psi: MarkFunction::Zero }
    }
}

/// Market kernel `k(t, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelFunction {
    Constant { value: f64 },
    /// `a e^{−rate (t − s)}`.
    ExpLag { a: f64, rate: f64 },
    /// `a + b t`.
    LinearInT { a: f64, b: f64 },
    /// `Σ cᵢ (t − s)ⁱ`.
    PolynomialLag { coeffs: Vec<f64> },
}

impl KernelFunction {
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        match self {
            KernelFunction::Constant { value } => *value,
            KernelFunction::ExpLag { a, rate } => a * (-rate * (t - s)).exp(),
            KernelFunction::LinearInT { a, b } => a + b * t,
            KernelFunction::PolynomialLag { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * (t - s) + c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub b0: KernelFunction,
    pub sigma0: KernelFunction,
    pub c0: f64,
    pub x0: f64,
    pub utility: Utility,
}

/// State equation and performance functional for `simulate`, `adjoint`, `check`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelPreset {
    #[default]
    Lq,
    Nonlinear,
    TimeDependent,
    XFree { c: f64 },
    LogWealth { b0: f64, sigma0: f64, x0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlPreset {
    Constant { value: f64 },
    /// Value `values[i]` on `[breaks[i], breaks[i+1])`.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
    /// `b₀/σ₀² + κ (z − B(t)) / (σ₀ (T₀ − t))`.
    Insider { b0: f64, sigma0: f64, kappa: f64 },
}

impl Default for ControlPreset {
    fn default() -> Self {
        ControlPreset::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_scenarios: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZGrid {
    pub window: (f64, f64),
    pub nodes: usize,
}

impl Default for ZGrid {
    fn default() -> Self {
        ZGrid { window: (-2.0, 2.0), nodes: 9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub n_nodes: usize,
    pub envelope: f64,
    #[serde(default)]
    pub x_cutoff: Option<f64>,
    /// `z` window and node count of density integrals.
    pub z_window: (f64, f64),
    pub z_nodes: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        let q = QuadratureSpec::default();
        QuadratureConfig { n_nodes: q.n_nodes, envelope: q.envelope, x_cutoff: q.x_cutoff, z_window: q.z_window, z_nodes: q.z_nodes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// First-order-condition tolerance of `check`.
    pub foc: f64,
    /// Largest tolerated `|∫M dz − 1|` in `donsker`.
    pub normalization: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { foc: 1e-2, normalization: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Scenarios written to the CSV fields.
    pub scenarios: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { scenarios: 4 }
    }
}

fn bad(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

/// Re-labels a parameter error with the config key it came from.
fn under<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidParameter { name, reason } => bad(format!("{key}.{name}"), reason),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            bad(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that does not need simulated paths.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(bad("name", "must be a plain directory name"));
        }
        self.grid()?;
        self.levy()?;
        self.chaos()?;
        if self.monte_carlo.n_scenarios < 2 {
            return Err(bad("monte_carlo.n_scenarios", "need at least 2 scenarios"));
        }
        let (lo, hi) = self.z_grid.window;
        if self.z_grid.nodes == 0 || !(lo < hi || (lo == hi && self.z_grid.nodes == 1)) {
            return Err(bad("z_grid", "window must satisfy lo < hi, or lo = hi with a single node"));
        }
        let q = &self.quadrature;
        if q.n_nodes < 2 || q.n_nodes % 2 != 0 {
            return Err(bad("quadrature.n_nodes", format!("must be even and >= 2, got {}", q.n_nodes)));
        }
        if !(q.envelope > 0.0 && q.envelope < 1.0) {
            return Err(bad("quadrature.envelope", "must lie in (0, 1)"));
        }
        if !(q.z_window.0 < q.z_window.1) || q.z_nodes < 2 {
            return Err(bad("quadrature.z_window", "need lo < hi and at least 2 nodes"));
        }
        if let Some(r) = &self.regression {
            if r.degree == 0 {
                return Err(bad("regression.degree", "must be at least 1"));
            }
        }
        if !(self.tolerances.foc > 0.0) {
            return Err(bad("tolerances.foc", "must be positive"));
        }
        if !(self.tolerances.normalization > 0.0) {
            return Err(bad("tolerances.normalization", "must be positive"));
        }
        if let ModelPreset::LogWealth { sigma0, x0, .. } = self.model {
            if !(sigma0 > 0.0) || !(x0 > 0.0) {
                return Err(bad("model", "log_wealth needs sigma0 > 0 and x0 > 0"));
            }
        }
        match &self.control {
            ControlPreset::Piecewise { breaks, values } => {
                if breaks.len() != values.len() || breaks.is_empty() {
                    return Err(bad("control.breaks", "needs one value per break"));
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(bad("control.breaks", "must increase strictly"));
                }
            }
            ControlPreset::Insider { sigma0, .. } if *sigma0 == 0.0 => {
                return Err(bad("control.sigma0", "must be non-zero"));
            }
            _ => {}
        }
        if self.market.is_some() {
            let m = self.market()?;
            under("market", m.validate_on(&self.grid()?, &self.z_nodes()))?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        under("grid", TimeGrid::new(self.grid.t, self.grid.t0, self.grid.n))
    }

    pub fn levy(&self) -> Result<LevyModel> {
        let marks = self.levy.marks.iter().map(|m| Mark { size: m.size, prob: m.prob }).collect();
        under("levy", LevyModel::new(self.levy.intensity, marks))
    }

    pub fn chaos(&self) -> Result<ChaosSpec> {
        let beta = self.chaos.beta.clone();
        let psi = self.chaos.psi;
        under("chaos", ChaosSpec::new(move |t| beta.eval(t), move |_, zeta| psi.eval(zeta), self.grid.t0))
    }

    pub fn market(&self) -> Result<MarketSpec> {
        let m = self.market.as_ref().ok_or_else(|| bad("market", "this command needs a market section"))?;
        let (b0, s0) = (m.b0.clone(), m.sigma0.clone());
        under("market", MarketSpec::new(move |t, s, _| b0.eval(t, s), move |t, s, _| s0.eval(t, s), m.c0, m.x0, m.utility))
    }

    pub fn model(&self) -> Model {
        match self.model {
            ModelPreset::Lq => models::lq(),
            ModelPreset::Nonlinear => models::nonlinear(),
            ModelPreset::TimeDependent => models::time_dependent(),
            ModelPreset::XFree { c } => models::x_free(c),
            ModelPreset::LogWealth { b0, sigma0, x0 } => models::log_wealth(b0, sigma0, x0),
        }
    }

    pub fn control(&self) -> Box<dyn Control + Send> {
        match &self.control {
            ControlPreset::Constant { value } => Box::new(Constant(*value)),
            ControlPreset::Piecewise { breaks, values } => {
                Box::new(PiecewiseConstant { breaks: breaks.clone(), values: values.clone() })
            }
            ControlPreset::Insider { b0, sigma0, kappa } => {
                Box::new(models::insider_fraction(*b0, *sigma0, self.grid.t0, *kappa))
            }
        }
    }

    pub fn z_nodes(&self) -> Vec<f64> {
        let (lo, hi) = self.z_grid.window;
        if self.z_grid.nodes == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            linspace(lo, hi, self.z_grid.nodes)
        }
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        let q = &self.quadrature;
        QuadratureSpec { x_cutoff: q.x_cutoff, n_nodes: q.n_nodes, envelope: q.envelope, z_window: q.z_window, z_nodes: q.z_nodes }
    }

    /// SHA-256 of the canonical (re-serialized, field-ordered) JSON.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "g",
        "grid": { "T": 0.5, "T0": 1.0, "N": 8 },
        "monte_carlo": { "n_scenarios": 10, "seed": 1 }
    }"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.model, ModelPreset::Lq);
        assert_eq!(c.z_nodes().len(), 9);
        assert!(c.chaos().unwrap().is_gaussian(&c.levy().unwrap()));
    }

    #[test]
    fn unknown_preset_names_its_key() {
        let text = MINIMAL.replace(r#""name": "g","#, r#""name": "g", "chaos": { "beta": { "preset": "cubic" } },"#);
        let e = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key.starts_with("chaos.beta")), "{e}");
    }

    #[test]
    fn bad_grid_names_its_key() {
        let e = ExperimentConfig::from_json(&MINIMAL.replace("\"N\": 8", "\"N\": 0")).unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key.starts_with("grid")), "{e}");
    }

    #[test]
    fn volatility_floor_is_enforced() {
        let text = MINIMAL.replace(
            r#""name": "g","#,
            r#""name": "g", "market": {
                "b0": { "preset": "constant", "value": 0.1 },
                "sigma0": { "preset": "exp_lag", "a": 0.5, "rate": 4.0 },
                "c0": 0.2, "x0": 1.0, "utility": { "name": "log" } },"#,
        );
        let e = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(e.to_string().contains("bounded away from 0"), "{e}");
        assert!(matches!(&e, Error::Config { key, .. } if key == "market.sigma0"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.monte_carlo.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn presets_evaluate() {
        assert_eq!(TimeFunction::Polynomial { coeffs: vec![1.0, 2.0, 3.0] }.eval(2.0), 17.0);
        assert!((KernelFunction::ExpLag { a: 2.0, rate: 1.0 }.eval(1.0, 1.0) - 2.0).abs() < 1e-15);
        assert_eq!(MarkFunction::Proportional { a: 0.5 }.eval(-2.0), -1.0);
    }
}
