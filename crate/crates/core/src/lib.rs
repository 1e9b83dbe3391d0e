//! Structure-preserving simulation of entropic cross-diffusion systems.

pub mod diagnostics;
pub mod entropy;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod particle;
pub mod rates;
pub mod solver;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
