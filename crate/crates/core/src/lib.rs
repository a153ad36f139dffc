//! Frozen Gaussian approximation on Bloch bands.
//!
//! The crate covers the whole numerical pipeline for
//! `iε ∂ₜψ = −ε²/2 Δψ + V(x/ε)ψ + U(x)ψ`:
//! band structure of the cell operator, the semiclassical windowed Bloch
//! transform, trajectory dynamics, wave-field synthesis and a split-step
//! reference solver used as ground truth.

pub mod analytic;
pub mod bloch;
pub mod dispersion;
pub mod dynamics;
pub mod error;
pub mod lattice;
pub mod phase_space;
pub mod pipeline;
pub mod potential;
pub mod reference;
pub mod spline;
pub mod synthesis;
pub mod wavefield;

pub use error::{FgaError, Result};
pub use num_complex::Complex64 as C64;
