//! Finite models of spaces of homogeneous type, random dyadic systems,
//! weighted Haar bases, and the constants of the two-weight inequality for
//! Calderón–Zygmund operators.

pub mod constants;
pub mod corona;
pub mod dyadic;
pub mod error;
pub mod haar;
pub mod harness;
pub mod operators;
pub mod rng;
pub mod space;

pub use error::{Error, Result};
