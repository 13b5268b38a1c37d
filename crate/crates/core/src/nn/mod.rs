//! Generative convolutional estimator trained with the energy score.
//!
//! A convolutional trunk maps a field to a dense feature vector `h`. Each
//! posterior sample multiplies `h` elementwise by its own latent draw from
//! `N(1, I)` before the linear output layer, so a single forward pass yields
//! `m` samples from the approximate posterior.

pub mod checkpoint;
pub mod layers;
mod network;
mod posterior;
mod train;

pub use network::{preprocess, Cache, HeadKind, Network, NetworkSpec, Tensor};
pub use train::{loss_and_grad, output_loss, train, EpochLog, TrainConfig, TrainState, TrainedModel, Trainer};
pub use posterior::{enforce_monotone, forward, predict, summarize, theta_curves, Functional, Prediction};
