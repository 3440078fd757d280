//! Numerical checks of the change-of-variable formula for Lebesgue
//! integrals: scale factors of linear maps, dyadic grid measure brackets,
//! one-sided derivatives, injectivity patches, the Banach indicatrix and the
//! end-to-end identity `∫_{F(E)} φ = ∫_E φ(F) |det F'|`.

pub mod cli;
pub mod diff;
pub mod error;
pub mod grid;
pub mod indicatrix;
pub mod linop;
pub mod patches;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
