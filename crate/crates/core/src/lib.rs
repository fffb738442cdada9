//! Insider stochastic control of Volterra equations.
//!
//! An insider knows a future random variable `Z` (a first-order chaos
//! functional of the driving noise). Conditioning on `Z = z` through the
//! Donsker delta field `M(t, z) = E[δ_Z(z) | F_t]` turns the insider problem
//! into a family of classical, `z`-parameterized problems for a stochastic
//! Volterra integral equation. This crate simulates every object in that
//! reduction and checks the resulting maximum principles numerically:
//!
//! - [`paths`]: Brownian and compensated-Poisson drivers on a uniform grid.
//! - [`chaos`]: the insider signal `Z(t)` and its remaining-variance profile.
//! - [`donsker`]: the conditional density field `M`, its Hida–Malliavin
//!   traces and the ratio `Φ`.
//! - [`svie`]: forward Euler solver for the parameterized Volterra state and
//!   its variational (derivative) process.
//! - [`adjoint`]: Hamiltonians and the adjoint BSDE by least-squares Monte Carlo.
//! - [`maxprin`]: performance evaluation, Gâteaux derivatives, necessary and
//!   sufficient condition checkers and a brute-force control oracle.
//! - [`portfolio`]: the optimal insider portfolio in a Volterra market.
//! - [`cli`] and [`suite`]: experiment orchestration and the validation battery.

pub mod adjoint;
pub mod chaos;
pub mod cli;
pub mod config;
pub mod donsker;
mod error;
pub mod maxprin;
pub mod models;
pub mod paths;
pub mod portfolio;
pub mod regression;
pub mod stats;
pub mod suite;
pub mod svie;

pub use error::{Error, Result};
