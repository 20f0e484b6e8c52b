//! Numerical laboratory for traveling waves in reaction–diffusion systems
//! driven by multiplicative noise.
//!
//! The crate builds, on one uniform 1-D grid, the full chain of objects needed
//! to study how a scalar noise source shifts the speed and shape of a
//! traveling wave:
//!
//! 1. deterministic profiles `(Φ₀, c₀)` by damped Newton iteration
//!    ([`detwave::solve_wave`]), together with the adjoint zero mode `ψ`
//!    and a spectral-gap certificate ([`detwave::spectrum`]);
//! 2. noise-corrected profiles `(Φ_σ, c_σ)` solving the modified wave
//!    equation with the quadratic-variation terms retained
//!    ([`stochwave::solve_stochastic_wave`]), plus the small-σ expansion
//!    `c_σ ≈ c₀ + σ² c₂` ([`stochwave::speed_expansion`]);
//! 3. semigroup-based predictions for the second-order phase drift that the
//!    frame-tracking SDE picks up from off-diagonal second moments
//!    ([`semigroup::orbital_drift_leading`]);
//! 4. direct Monte Carlo simulation of the stochastic PDE coupled to the
//!    phase SDE ([`spdesim::run_path`], [`ensemble::run_ensemble`]), with
//!    variance-reduced drift estimators and stability functionals that can be
//!    compared against the predictions from steps 2–3.
//!
//! Everything downstream of the grid is deterministic given a seed; ensemble
//! reductions are bit-reproducible independent of thread count.

pub mod band;
pub mod cli;
pub mod config;
pub mod detwave;
pub mod ensemble;
mod error;
pub mod grid;
pub mod kinetics;
pub mod semigroup;
pub mod spdesim;
pub mod stochwave;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
