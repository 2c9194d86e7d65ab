//! Text-conditioned generation of neural-network parameters.

pub mod arch;
pub mod baselines;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pmodel;
pub mod rng;
pub mod universe;

pub use error::{Error, Result};
