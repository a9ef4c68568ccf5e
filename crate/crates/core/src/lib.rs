pub mod error;
pub mod geometry;
pub mod io;
pub mod spectral;

pub use error::{Error, Result};
pub mod phantom;
pub mod nn;
pub mod decomp;
pub mod diffusion;
pub mod denoiser;
pub mod solver;
pub mod metrics;
pub mod dataset;
pub mod config;
pub mod pipeline;
