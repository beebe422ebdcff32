//! Simulation and analysis kernels for spatial stochastic population models.
//!
//! The crate is `no_std` and only needs `alloc`. Every randomized routine
//! takes a caller-owned random stream; see [`rng`] for the counter-based
//! stream derivation used to keep replicas independent and reproducible.
//!
//! Modules:
//! - [`geometry`]: truncated hierarchical groups, tori and mean-field arenas,
//!   migration kernels, Green-function diagnostics.
//! - [`dynamics`]: Euler–Maruyama steppers for interacting Fleming–Viot
//!   systems, the coloured seedbank system and the McKean–Vlasov process.
//! - [`cannings`]: event-driven particle systems with Λ-resampling and
//!   hierarchical block resampling, logging ancestry.
//! - [`genealogy`]: sampled ultrametric genealogies and their statistics.
//! - [`renorm`]: block averages, the volatility recursion, dichotomy
//!   classification, interaction chains and seedbank criteria.
//! - [`fss`]: finite system scheme comparisons.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cannings;
pub mod dynamics;
pub mod error;
pub mod fss;
pub mod genealogy;
pub mod geometry;
pub mod renorm;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
