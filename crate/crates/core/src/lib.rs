pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod marginals;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scoring;
pub mod simulate;
pub mod spatial;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
