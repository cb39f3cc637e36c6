//! Multiple-hidden i.i.d. model for statistical multiple alignment under the
//! TKF91 insertion/deletion process with F81 substitutions.
//!
//! Numeric code is generic over [`Real`]; the aliases below fix the scalar.

pub mod divergence;
pub mod error;
pub mod hmm;
pub mod homology;
pub mod io;
pub mod likelihood;
pub mod params;
pub mod phylo;
pub mod real;
pub mod simulate;
pub mod substitution;
pub mod tkf91;

pub use error::{Error, Result};
pub use real::Real;

pub type EvolParams = params::EvolParams<f64>;
pub type EvolParamsF32 = params::EvolParams<f32>;
