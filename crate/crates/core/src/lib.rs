//! Estimated Cramér–Rao bounds from conditional normalizing flows.

pub mod diff;
pub mod error;
pub mod flow;
pub mod layers;
pub mod linalg;
pub mod oracles;
pub mod rng;
pub mod score;
pub mod train;

pub use error::{Error, Result};
