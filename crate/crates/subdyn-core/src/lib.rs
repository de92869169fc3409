//! Numerical laboratory for reduced dynamics of confined quantum fields.
//!
//! Builds Lindblad-type generators out of resolvent scattering maps on
//! truncated Fock spaces and checks their structural properties (trace and
//! positivity preservation, conservation laws, trajectory decompositions,
//! maximum-entropy thermodynamics, memory functionals) against exact unitary
//! evolution of the full system.

pub mod dynamics;
pub mod error;
pub mod fock;
pub mod io;
pub mod kinetics;
pub mod linalg;
pub mod lindblad;
pub mod modes;
pub mod par;
pub mod scattering;
pub mod thermo;
pub mod trajectories;

pub use error::{Error, Result};

/// Reduced Planck constant in the natural-unit convention used throughout.
pub const HBAR: f64 = 1.0;
