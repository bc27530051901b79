//! Variational autoencoders whose binary latents follow a bipartite Boltzmann machine prior.

pub mod checkpoint;
pub mod config;
pub mod continuous;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod posterior;
pub mod rbm;
pub mod rng;
pub mod sampling;
pub mod smoothing;
pub mod trainer;

pub use error::{Error, Result};

/// Worker threads for parallel sections: `DVAE_THREADS` if set, otherwise
/// the available hardware parallelism. Results never depend on this value.
pub fn threads() -> usize {
    std::env::var("DVAE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
