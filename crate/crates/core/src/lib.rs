//! Kernel-distance training of two-layer fully connected generative networks.
//!
//! A generator `Y = g(B d(A Z + a) + b)` is fitted by stochastic gradient
//! descent on the Gaussian-kernel distance
//! `E[k(Y¹,Y²) − k(Y¹,X) − k(Y²,X)]`, which is a pure minimization problem
//! (no discriminator). The crate provides:
//!
//! - [`kernel`]: Gaussian kernel, its gradient, the instantaneous loss and
//!   the two-sample MMD score.
//! - [`generator`]: forward pass and the rank-one layer gradients.
//! - [`trainer`]: the fresh-pair, delayed-sample and batched training loops.
//! - [`sa_lab`]: a small stochastic-approximation laboratory comparing
//!   classical, batched, smoothed and delayed SGD against the Lyapunov
//!   steady-state prediction.
//! - [`io`]: dataset loading, latent sampling and checkpoints.

pub mod error;
pub mod generator;
pub mod io;
pub mod kernel;
pub mod sa_lab;
pub mod trainer;

pub use error::{Error, Result};
pub use generator::{BackpropPair, GeneratorParams, LayerCache, NetShape};
pub use io::{DataFormat, Dataset, ScaleMode};
pub use kernel::{KernelSpec, SampleSet};
pub use trainer::{Algorithm, TrainConfig, TrainerState};
