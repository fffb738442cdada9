//! Driving noise: Brownian increments and a compound-Poisson random measure
//! with finitely many marks, sampled on a shared uniform grid.
//!
//! Every scenario owns an independent ChaCha stream selected by its index, so
//! paths are reproducible bit-for-bit regardless of thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Relative tolerance used when matching a time against grid points.
const GRID_EPS: f64 = 1e-9;

/// Where the insider horizon `T₀` falls relative to the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    /// `T₀ ≤ T`: snapped to grid point `index`, `snap` is `|t_index - T₀|`.
    OnGrid { index: usize, snap: f64 },
    /// `T₀ > T`.
    BeyondGrid,
}

/// Uniform partition `0 = t₀ < … < t_N = T` with the insider horizon marked.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_max: f64,
    n_steps: usize,
    dt: f64,
    t0: f64,
    horizon: Horizon,
}

impl TimeGrid {
    pub fn new(t_max: f64, t0: f64, n_steps: usize) -> Result<Self> {
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(Error::param("T", format!("must be positive, got {t_max}")));
        }
        if !(t0 > 0.0) || !t0.is_finite() {
            return Err(Error::param("T0", format!("must be positive, got {t0}")));
        }
        if n_steps < 2 {
            return Err(Error::param("N", format!("need at least 2 steps, got {n_steps}")));
        }
        let dt = t_max / n_steps as f64;
        let horizon = if t0 <= t_max * (1.0 + GRID_EPS) {
            let index = ((t0 / dt).round() as usize).min(n_steps);
            Horizon::OnGrid { index, snap: (index as f64 * dt - t0).abs() }
        } else {
            Horizon::BeyondGrid
        };
        Ok(TimeGrid { t_max, n_steps, dt, t0, horizon })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// The insider horizon as supplied (before snapping).
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// Grid time `t_k`. The last point is exactly `T`.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_max
        } else {
            k as f64 * self.dt
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }

    /// Index of `t` on the grid, or [`Error::OffGrid`].
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt;
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > GRID_EPS * (1.0 + x.abs()) {
            return Err(Error::OffGrid { t });
        }
        Ok(k as usize)
    }
}

/// One atom of the Lévy measure: jump size `ζ ≠ 0` with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mark {
    pub size: f64,
    pub prob: f64,
}

/// Finite-activity Lévy measure `ν(dζ) = λ Σ pᵢ δ_{ζᵢ}`.
///
/// With finitely many marks every exponential moment of `ν` is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyModel {
    intensity: f64,
    marks: Vec<Mark>,
}

impl LevyModel {
    pub fn new(intensity: f64, marks: Vec<Mark>) -> Result<Self> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return Err(Error::param("intensity", format!("must be finite and >= 0, got {intensity}")));
        }
        if intensity > 0.0 && marks.is_empty() {
            return Err(Error::param("marks", "positive intensity needs at least one mark"));
        }
        for m in &marks {
            if m.size == 0.0 || !m.size.is_finite() {
                return Err(Error::param("marks", format!("jump size must be finite and non-zero, got {}", m.size)));
            }
            if !(m.prob > 0.0 && m.prob <= 1.0) {
                return Err(Error::param("marks", format!("probability must lie in (0, 1], got {}", m.prob)));
            }
        }
        let total: f64 = marks.iter().map(|m| m.prob).sum();
        if !marks.is_empty() && (total - 1.0).abs() > 1e-9 {
            return Err(Error::param("marks", format!("probabilities sum to {total}, expected 1")));
        }
        Ok(LevyModel { intensity, marks })
    }

    /// No jumps at all.
    pub fn none() -> Self {
        LevyModel { intensity: 0.0, marks: Vec::new() }
    }

    /// Single mark `ζ` at rate `λ`.
    pub fn single(intensity: f64, size: f64) -> Result<Self> {
        Self::new(intensity, vec![Mark { size, prob: 1.0 }])
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn marks(&self) -> &[Mark] {
        &self.marks
    }

    pub fn is_active(&self) -> bool {
        self.intensity > 0.0
    }

    /// `ν`-weight of mark `i`: `λ pᵢ`.
    pub fn weight(&self, i: usize) -> f64 {
        self.intensity * self.marks[i].prob
    }

    /// `∫ f(ζ) ν(dζ)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.marks.iter().map(|m| self.intensity * m.prob * f(m.size)).sum()
    }

    pub fn mark_index(&self, size: f64) -> Option<usize> {
        self.marks.iter().position(|m| m.size == size)
    }
}

/// A jump of the Poisson random measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    /// Step `k` such that the jump time lies in `(t_k, t_{k+1}]`.
    pub step: usize,
    pub time: f64,
    pub mark_index: usize,
    pub size: f64,
}

/// Per-scenario Brownian increments and jump records. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPaths {
    n_scenarios: usize,
    n_steps: usize,
    dt: f64,
    seed: u64,
    levy: LevyModel,
    increments: Vec<f64>,
    jumps: Vec<Vec<Jump>>,
}

/// Sample `n` independent scenarios of `(ΔB, N)` on `grid`.
pub fn sample_driver(grid: &TimeGrid, levy: &LevyModel, n: usize, seed: u64) -> Result<DriverPaths> {
    if n == 0 {
        return Err(Error::param("n_scenarios", "need at least one scenario"));
    }
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let per: Vec<(Vec<f64>, Vec<Jump>)> = (0..n)
        .into_par_iter()
        .map(|s| sample_scenario(grid, levy, seed, s as u64))
        .collect();
    let mut increments = Vec::with_capacity(n * n_steps);
    let mut jumps = Vec::with_capacity(n);
    for (inc, js) in per {
        increments.extend_from_slice(&inc);
        jumps.push(js);
    }
    Ok(DriverPaths { n_scenarios: n, n_steps, dt, seed, levy: levy.clone(), increments, jumps })
}

fn sample_scenario(grid: &TimeGrid, levy: &LevyModel, seed: u64, stream: u64) -> (Vec<f64>, Vec<Jump>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sd = dt.sqrt();
    let poisson = if levy.is_active() { Poisson::new(levy.intensity * dt).ok() } else { None };
    let mut inc = Vec::with_capacity(n_steps);
    let mut jumps = Vec::new();
    for k in 0..n_steps {
        let z: f64 = rng.sample(StandardNormal);
        inc.push(sd * z);
        if let Some(p) = &poisson {
            let count = p.sample(&mut rng) as usize;
            let t_lo = grid.t(k);
            let t_hi = grid.t(k + 1);
            let mut step_jumps: Vec<Jump> = (0..count)
                .map(|_| {
                    // (t_lo, t_hi]: 1 - U with U in [0, 1)
                    let time = t_lo + (t_hi - t_lo) * (1.0 - rng.random::<f64>());
                    let mark_index = pick_mark(levy, rng.random::<f64>());
                    Jump { step: k, time, mark_index, size: levy.marks[mark_index].size }
                })
                .collect();
            step_jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
            jumps.extend(step_jumps);
        }
    }
    (inc, jumps)
}

fn pick_mark(levy: &LevyModel, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, m) in levy.marks.iter().enumerate() {
        acc += m.prob;
        if u < acc {
            return i;
        }
    }
    levy.marks.len() - 1
}

impl DriverPaths {
    pub fn n_scenarios(&self) -> usize {
        self.n_scenarios
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn levy(&self) -> &LevyModel {
        &self.levy
    }

    /// `ΔB_k` for every step of scenario `s`.
    pub fn increments(&self, s: usize) -> &[f64] {
        &self.increments[s * self.n_steps..(s + 1) * self.n_steps]
    }

    pub fn increment(&self, s: usize, k: usize) -> f64 {
        self.increments[s * self.n_steps + k]
    }

    pub fn jumps(&self, s: usize) -> &[Jump] {
        &self.jumps[s]
    }

    /// `B(t_k)` for `k = 0..=N` along scenario `s`.
    pub fn brownian_path(&self, s: usize) -> Vec<f64> {
        let mut path = Vec::with_capacity(self.n_steps + 1);
        let mut b = 0.0;
        path.push(b);
        for dw in self.increments(s) {
            b += dw;
            path.push(b);
        }
        path
    }

    /// Number of jumps of mark `i` in step `k` of scenario `s`.
    pub fn jump_count(&self, s: usize, k: usize, i: usize) -> usize {
        self.jumps[s].iter().filter(|j| j.step == k && j.mark_index == i).count()
    }

    /// Per-step compensated counts `ΔÑ_{k,i} = #jumps − λpᵢΔt`, laid out `[k][i]`.
    pub fn compensated_counts(&self, s: usize) -> Vec<f64> {
        let m = self.levy.marks.len();
        let mut out = vec![0.0; self.n_steps * m];
        for k in 0..self.n_steps {
            for i in 0..m {
                out[k * m + i] = -self.levy.weight(i) * self.dt;
            }
        }
        for j in &self.jumps[s] {
            out[j.step * m + j.mark_index] += 1.0;
        }
        out
    }

    /// Aggregate `factor` consecutive steps into one (Brownian increments are
    /// summed, jumps keep their times). Used for coupled convergence studies.
    pub fn coarsen(&self, factor: usize) -> Result<DriverPaths> {
        if factor == 0 || self.n_steps % factor != 0 || self.n_steps / factor < 2 {
            return Err(Error::param("factor", format!("{factor} does not divide {} steps", self.n_steps)));
        }
        let n_steps = self.n_steps / factor;
        let mut increments = Vec::with_capacity(self.n_scenarios * n_steps);
        for s in 0..self.n_scenarios {
            for chunk in self.increments(s).chunks(factor) {
                increments.push(chunk.iter().sum());
            }
        }
        let jumps = self
            .jumps
            .iter()
            .map(|js| js.iter().map(|j| Jump { step: j.step / factor, ..*j }).collect())
            .collect();
        Ok(DriverPaths {
            n_scenarios: self.n_scenarios,
            n_steps,
            dt: self.dt * factor as f64,
            seed: self.seed,
            levy: self.levy.clone(),
            increments,
            jumps,
        })
    }
}

/// `∫₀^upto ∫ f(t, ζ) Ñ(dt, dζ)` per scenario: jumps minus the left-point
/// compensator `λ Σ_k Δt Σᵢ pᵢ f(t_k, ζᵢ)`.
pub fn compensated_integral(
    paths: &DriverPaths,
    grid: &TimeGrid,
    f: impl Fn(f64, f64) -> f64 + Sync,
    upto: f64,
) -> Result<Vec<f64>> {
    let k_end = grid.index_of(upto)?;
    let levy = paths.levy();
    let compensator: f64 = (0..k_end)
        .map(|k| grid.dt() * levy.integrate(|zeta| f(grid.t(k), zeta)))
        .sum();
    Ok((0..paths.n_scenarios())
        .into_par_iter()
        .map(|s| {
            let jumps: f64 = paths
                .jumps(s)
                .iter()
                .filter(|j| j.step < k_end)
                .map(|j| f(j.time, j.size))
                .sum();
            jumps - compensator
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_points() {
        let g = TimeGrid::new(1.0, 1.0, 4).unwrap();
        assert_eq!(g.points(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.horizon(), Horizon::OnGrid { index: 4, snap: 0.0 });
    }

    #[test]
    fn horizon_beyond_grid() {
        let g = TimeGrid::new(1.0, 2.0, 4).unwrap();
        assert_eq!(g.horizon(), Horizon::BeyondGrid);
    }

    #[test]
    fn step_size() {
        let g = TimeGrid::new(0.5, 1.0, 64).unwrap();
        assert_eq!(g.dt(), 0.0078125);
    }

    #[test]
    fn horizon_snaps_to_nearest_point() {
        let g = TimeGrid::new(1.0, 0.3, 4).unwrap();
        match g.horizon() {
            Horizon::OnGrid { index, snap } => {
                assert_eq!(index, 1);
                assert!((snap - 0.05).abs() < 1e-12);
            }
            h => panic!("unexpected {h:?}"),
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(0.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(1.0, -1.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 1).is_err());
    }

    #[test]
    fn index_lookup() {
        let g = TimeGrid::new(1.0, 1.0, 4).unwrap();
        assert_eq!(g.index_of(0.75).unwrap(), 3);
        assert!(matches!(g.index_of(0.3), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn levy_validation() {
        assert!(LevyModel::new(1.0, vec![Mark { size: 0.0, prob: 1.0 }]).is_err());
        assert!(LevyModel::new(1.0, vec![Mark { size: 1.0, prob: 0.5 }]).is_err());
        assert!(LevyModel::new(-1.0, vec![]).is_err());
        let l = LevyModel::new(2.0, vec![Mark { size: 1.0, prob: 0.25 }, Mark { size: -0.5, prob: 0.75 }]).unwrap();
        assert!((l.integrate(|z| z) - (0.5 - 0.75)).abs() < 1e-15);
    }

    #[test]
    fn zero_intensity_has_no_jumps() {
        let g = TimeGrid::new(1.0, 1.0, 16).unwrap();
        let p = sample_driver(&g, &LevyModel::none(), 50, 1).unwrap();
        assert!((0..50).all(|s| p.jumps(s).is_empty()));
        let c = compensated_integral(&p, &g, |_, _| 1.0, 1.0).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jump_times_lie_in_their_step() {
        let g = TimeGrid::new(1.0, 1.0, 8).unwrap();
        let l = LevyModel::single(5.0, 1.0).unwrap();
        let p = sample_driver(&g, &l, 100, 3).unwrap();
        for s in 0..100 {
            for j in p.jumps(s) {
                assert!(j.time > g.t(j.step) && j.time <= g.t(j.step + 1));
                assert!(j.time > 0.0 && j.time <= 1.0);
            }
        }
    }

    #[test]
    fn coarsen_sums_increments() {
        let g = TimeGrid::new(1.0, 1.0, 8).unwrap();
        let p = sample_driver(&g, &LevyModel::single(3.0, 1.0).unwrap(), 4, 9).unwrap();
        let c = p.coarsen(2).unwrap();
        assert_eq!(c.n_steps(), 4);
        let fine = p.brownian_path(2);
        let coarse = c.brownian_path(2);
        for k in 0..=4 {
            assert!((fine[2 * k] - coarse[k]).abs() < 1e-14);
        }
        assert_eq!(p.jumps(1).len(), c.jumps(1).len());
        assert!(p.coarsen(3).is_err());
    }
}
