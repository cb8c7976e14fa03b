//! Sub-Riemannian geodesics, second variation, small-time heat-kernel
//! constants and the Gaussian fluctuations of diffusion bridges.
pub mod cli;
pub mod error;
pub mod fluctuation;
pub mod hamflow;
pub mod models;
pub mod montecarlo;
pub mod secondvar;
pub mod shooting;

pub use error::{Error, Result};
