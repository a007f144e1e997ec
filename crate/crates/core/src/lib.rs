//! Kinetic Langevin particle systems and their mean-field limit.
//!
//! The crate simulates the `N`-particle underdamped Langevin system with
//! confinement `V` and pairwise interaction `W`, solves the limiting
//! Vlasov-Fokker-Planck equation in one dimension, and measures how fast both
//! relax and how close they are (Wasserstein distances, entropies, error
//! statistics). It also evaluates the explicit rate constants of the theory.
//!
//! Numerical types are generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar for the common case.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaos_metrics;
pub mod constants;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod kinetic_pde;
pub mod num;
pub mod potentials;

pub use error::{Error, Result};
pub use num::Real;

pub type PhaseEnsembleF64 = dynamics::PhaseEnsemble<f64>;
pub type PhaseEnsembleF32 = dynamics::PhaseEnsemble<f32>;
pub type PotentialSpecF64 = potentials::PotentialSpec<f64>;
pub type PotentialSpecF32 = potentials::PotentialSpec<f32>;
pub type ModelParamsF64 = dynamics::ModelParams<f64>;
pub type ModelParamsF32 = dynamics::ModelParams<f32>;
pub type GridDensityF64 = equilibrium::GridDensity<f64>;
pub type GridDensityF32 = equilibrium::GridDensity<f32>;
pub type WeightMatrixF64 = constants::WeightMatrix<f64>;
pub type TheoremConstantsF64 = constants::TheoremConstants<f64>;

/// Crate version string recorded in run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
