//! Negative-gradient flow machinery for Morse functions on a few built-in
//! Riemannian manifolds, small enough to be driven to machine precision:
//! critical points and their eigenframes, adaptive flow integration across
//! chart transitions, moduli of connecting orbits with orientation signs,
//! the stratified compactifications of flow-line spaces, model corner
//! charts, a closed-form chart where the compactification fails to be C^1,
//! and the resulting integer homology.
//!
//! The crate is no_std-compatible (enable the `libm` feature and disable
//! `std`); everything IO-shaped lives in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("morseflow-core requires either the `std` (default) or `libm` feature");

pub mod error;
mod real;
mod jet;
pub mod linalg;
pub mod manifold;
pub mod morse;
pub mod flow;
pub mod moduli;
pub mod strata;
pub mod cp2;
pub mod homology;

pub use error::{Error, Result};
