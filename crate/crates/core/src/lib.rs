//! Riemannian flow matching for periodic crystals.
//!
//! Crystals are points on the product of a flat torus (fractional
//! coordinates), a Euclidean lattice space and, for de novo generation, a
//! Euclidean space of analog bits. A learned vector field transports a simple
//! base distribution onto the data distribution.

pub mod basedist;
pub mod cli;
pub mod crystal;
pub mod engine;
pub mod error;
pub mod flowmatch;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod net;
pub mod selfcheck;
pub mod synth;

pub use error::{Error, Result};
