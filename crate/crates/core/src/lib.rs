//! Periodic homogenization of two-dimensional elliptic cell problems:
//! microstructure sampling, a Q1 finite-element cell solver, homogenized
//! tensors, stability checks and a Fourier neural operator surrogate for the
//! coefficient-to-corrector map.

pub mod cellsolver;
pub mod dataio;
pub mod error;
pub mod fft;
pub mod fno;
pub mod grid;
pub mod homogenize;
pub mod metrics;
pub mod microstructure;
pub mod rng;
pub mod scalar;
pub mod stability;

pub use error::{Error, Result};
pub use grid::{lp_norm, spectral_gradient, total_variation, PeriodicGrid};
pub use scalar::Scalar;

pub type ScalarField64 = grid::ScalarField<f64>;
pub type ScalarField32 = grid::ScalarField<f32>;
pub type VectorField64 = grid::VectorField<f64>;
pub type VectorField32 = grid::VectorField<f32>;

pub type FnoParams32 = fno::FnoParams<f32>;
pub type FnoParams64 = fno::FnoParams<f64>;
