//! Least-squares Monte Carlo on polynomial bases.
//!
//! A [`Projector`] regresses a per-scenario target on
//! `[φ, φ·ΔB_k, φ·ΔÑ_{k,1}, …]` where `φ` is an `F_{t_k}`-measurable basis.
//! The `φ` part estimates `E[y | F_{t_k}]`; the coefficients on the
//! martingale increments estimate the integrands of the martingale
//! representation over the step, i.e. `E[y ΔB_k | F_{t_k}] / Δt` and the
//! jump analogues. The normal-equation factorization is cached so many
//! targets can be projected on the same step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the Donsker-delta weight enters the basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Polynomials only.
    None,
    /// Polynomials of degree `d` together with `m ×` polynomials of degree `d − 1`.
    Augment,
    /// `m^κ ×` polynomials of degree `d`.
    Multiply(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub degree: usize,
    pub weight: WeightMode,
    /// Relative eigenvalue cutoff of the scaled Gram matrix.
    pub rcond: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec { degree: 3, weight: WeightMode::Augment, rcond: 1e-12 }
    }
}

impl RegressionSpec {
    pub fn with_weight(mut self, weight: WeightMode) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        self
    }
}

/// Basis functions evaluated on every scenario, stored column-wise.
#[derive(Debug, Clone)]
pub struct Basis {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
}

/// Exponent tuples of total degree `<= degree` in `n` variables.
fn monomials(n: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n]];
    for d in 1..=degree {
        let mut stack = vec![(Vec::<usize>::new(), d)];
        while let Some((prefix, left)) = stack.pop() {
            if prefix.len() == n - 1 {
                let mut e = prefix.clone();
                e.push(left);
                out.push(e);
                continue;
            }
            for k in (0..=left).rev() {
                let mut p = prefix.clone();
                p.push(k);
                stack.push((p, left - k));
            }
        }
    }
    out
}

fn standardize(features: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for f in features {
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let sd = (f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            continue;
        }
        let col: Vec<f64> = f.iter().map(|x| (x - mean) / sd).collect();
        let duplicate = kept.iter().any(|k| k.iter().zip(&col).all(|(a, b)| (a - b).abs() < 1e-9));
        if !duplicate {
            kept.push(col);
        }
    }
    kept
}

fn polynomial_columns(std: &[Vec<f64>], n_rows: usize, degree: usize) -> Vec<Vec<f64>> {
    if std.is_empty() {
        return vec![vec![1.0; n_rows]];
    }
    monomials(std.len(), degree)
        .into_iter()
        .map(|e| {
            (0..n_rows)
                .map(|r| e.iter().zip(std).map(|(&p, f)| f[r].powi(p as i32)).product())
                .collect()
        })
        .collect()
}

impl Basis {
    /// Polynomials in the standardized `features`, combined with the weight
    /// `m` according to `spec.weight`. Constant and duplicate features are
    /// dropped.
    pub fn new(features: &[&[f64]], weight: Option<&[f64]>, spec: &RegressionSpec) -> Self {
        let n_rows = features.first().map(|f| f.len()).or(weight.map(|w| w.len())).unwrap_or(0);
        let std = standardize(features);
        let columns = match (spec.weight, weight) {
            (WeightMode::None, _) | (_, None) => polynomial_columns(&std, n_rows, spec.degree),
            (WeightMode::Augment, Some(m)) => {
                let mut cols = polynomial_columns(&std, n_rows, spec.degree);
                for c in polynomial_columns(&std, n_rows, spec.degree.saturating_sub(1)) {
                    cols.push(c.iter().zip(m).map(|(a, b)| a * b).collect());
                }
                cols
            }
            (WeightMode::Multiply(kappa), Some(m)) => polynomial_columns(&std, n_rows, spec.degree)
                .into_iter()
                .map(|c| c.iter().zip(m).map(|(a, b)| a * b.powf(kappa)).collect())
                .collect(),
        };
        Basis { n_rows, columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
}

/// Cached least-squares solver for one time step.
#[derive(Debug, Clone)]
pub struct Projector {
    n_rows: usize,
    n_mart: usize,
    /// Unscaled basis columns `φ_i`.
    base: Vec<Vec<f64>>,
    /// Full design, each column divided by its RMS `scales[c]`.
    design: Vec<Vec<f64>>,
    scales: Vec<f64>,
    /// Pseudo-inverse of the scaled Gram matrix.
    pinv: DMatrix<f64>,
    rank: usize,
}

/// Result of projecting one target.
#[derive(Debug, Clone)]
pub struct JointFit {
    /// `E[y | F_t]` per scenario.
    pub conditional: Vec<f64>,
    /// Representation integrands per martingale column, per scenario.
    pub integrands: Vec<Vec<f64>>,
}

const CHUNK: usize = 1024;

impl Projector {
    /// `martingale` holds the increments `ΔB_k`, `ΔÑ_{k,i}` (may be empty).
    pub fn new(basis: &Basis, martingale: &[&[f64]], spec: &RegressionSpec) -> Result<Self> {
        let n_rows = basis.n_rows;
        if n_rows == 0 {
            return Err(Error::Regression("empty sample".into()));
        }
        if martingale.iter().any(|m| m.len() != n_rows) {
            return Err(Error::Regression("martingale column length mismatch".into()));
        }
        let mut design: Vec<Vec<f64>> = basis.columns.clone();
        for m in martingale {
            for c in &basis.columns {
                design.push(c.iter().zip(*m).map(|(a, b)| a * b).collect());
            }
        }
        let mut scales = Vec::with_capacity(design.len());
        for col in design.iter_mut() {
            let rms = (col.iter().map(|x| x * x).sum::<f64>() / n_rows as f64).sqrt();
            let s = if rms > 0.0 && rms.is_finite() { rms } else { 1.0 };
            col.iter_mut().for_each(|x| *x /= s);
            scales.push(s);
        }
        if design.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(Error::Regression("non-finite basis value".into()));
        }
        let p = design.len();
        let eig = SymmetricEigen::new(gram_matrix(&design, n_rows));
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cutoff = spec.rcond.max(1e-15) * top;
        let mut pinv = DMatrix::<f64>::zeros(p, p);
        let mut rank = 0;
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > cutoff {
                rank += 1;
                let v = eig.eigenvectors.column(i);
                pinv += (v * v.transpose()) / lam;
            }
        }
        if rank < p {
            log::debug!("regression basis reduced: rank {rank} of {p} columns");
        }
        Ok(Projector { n_rows, n_mart: martingale.len(), base: basis.columns.clone(), design, scales, pinv, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_columns(&self) -> usize {
        self.design.len()
    }

    /// Coefficients on the unscaled columns.
    fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = self
            .design
            .par_iter()
            .map(|col| {
                col.chunks(CHUNK)
                    .zip(y.chunks(CHUNK))
                    .map(|(c, t)| c.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
                    .collect::<Vec<_>>()
                    .into_iter()
                    .sum()
            })
            .collect();
        let beta = &self.pinv * DVector::from_vec(rhs);
        beta.iter().zip(&self.scales).map(|(b, s)| b / s).collect()
    }

    /// `Σ_i c_i φ_i` for coefficient block `block`.
    fn combine(&self, coef: &[f64], block: usize) -> Vec<f64> {
        let n = self.base.len();
        let c = &coef[block * n..(block + 1) * n];
        (0..self.n_rows)
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|r| self.base.iter().zip(c).map(|(col, b)| col[r] * b).sum())
            .collect()
    }

    /// `E[y | F_t]` only.
    pub fn conditional(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(self.combine(&self.coefficients(y), 0))
    }

    /// Conditional expectation together with the representation integrands.
    pub fn fit(&self, y: &[f64]) -> Result<JointFit> {
        self.check(y)?;
        let coef = self.coefficients(y);
        Ok(JointFit {
            conditional: self.combine(&coef, 0),
            integrands: (1..=self.n_mart).map(|m| self.combine(&coef, m)).collect(),
        })
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n_rows {
            return Err(Error::Regression(format!("target has {} rows, expected {}", y.len(), self.n_rows)));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression("non-finite target".into()));
        }
        Ok(())
    }
}

fn gram_matrix(design: &[Vec<f64>], n_rows: usize) -> DMatrix<f64> {
    let p = design.len();
    // Per-chunk partial Gram matrices summed in chunk order: deterministic
    // regardless of the thread count.
    let partials: Vec<Vec<f64>> = (0..n_rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n_rows);
            let mut g = vec![0.0; p * p];
            for i in 0..p {
                for j in 0..=i {
                    let s: f64 = design[i][lo..hi].iter().zip(&design[j][lo..hi]).map(|(a, b)| a * b).sum();
                    g[i * p + j] = s;
                }
            }
            g
        })
        .collect();
    let mut g = DMatrix::<f64>::zeros(p, p);
    for part in partials {
        for i in 0..p {
            for j in 0..=i {
                g[(i, j)] += part[i * p + j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            g[(j, i)] = g[(i, j)];
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(1, 4).len(), 5);
        assert_eq!(monomials(3, 2).len(), 10);
    }

    #[test]
    fn recovers_polynomial_and_increment_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let dt: f64 = 0.01;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dw: Vec<f64> = (0..n).map(|_| dt.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        // y = 1 + x² + (2 − x)·ΔW
        let y: Vec<f64> = (0..n).map(|i| 1.0 + x[i] * x[i] + (2.0 - x[i]) * dw[i]).collect();
        let spec = RegressionSpec { weight: WeightMode::None, ..Default::default() };
        let basis = Basis::new(&[&x], None, &spec);
        let proj = Projector::new(&basis, &[&dw], &spec).unwrap();
        let fit = proj.fit(&y).unwrap();
        for i in 0..n {
            assert!((fit.conditional[i] - 1.0 - x[i] * x[i]).abs() < 1e-8);
            assert!((fit.integrands[0][i] - (2.0 - x[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_features_collapse_to_mean() {
        let x = vec![3.0; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let spec = RegressionSpec::default();
        let basis = Basis::new(&[&x, &x], None, &spec);
        assert_eq!(basis.len(), 1);
        let proj = Projector::new(&basis, &[], &spec).unwrap();
        let c = proj.conditional(&y).unwrap();
        assert!((c[0] - 24.5).abs() < 1e-10);
    }

    #[test]
    fn duplicate_features_are_dropped() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let spec = RegressionSpec::default().with_weight(WeightMode::None);
        assert_eq!(Basis::new(&[&x, &x], None, &spec).len(), 4);
    }

    #[test]
    fn augmented_weight_spans_the_weight() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).cos()).collect();
        let m: Vec<f64> = x.iter().map(|v| (-v * v * 3.0).exp()).collect();
        let spec = RegressionSpec::default();
        let basis = Basis::new(&[&x], Some(&m), &spec);
        let proj = Projector::new(&basis, &[], &spec).unwrap();
        let y: Vec<f64> = m.iter().map(|v| 2.5 * v).collect();
        let c = proj.conditional(&y).unwrap();
        assert!(c.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn rejects_bad_targets() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let spec = RegressionSpec::default();
        let proj = Projector::new(&Basis::new(&[&x], None, &spec), &[], &spec).unwrap();
        assert!(proj.conditional(&[1.0; 3]).is_err());
        let mut y = vec![0.0; 10];
        y[2] = f64::NAN;
        assert!(proj.conditional(&y).is_err());
    }
}
