//! Sparse-coding networks and their evaluation under model-inversion attacks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 arrays, matmul, conv2d and its exact adjoint.
//! - [`rng`]: counter-based deterministic random numbers.
//! - [`lca`]: sparse codes by lateral-competition dynamics, dictionary learning.
//! - [`nn`]: layer stack (linear / batch-norm / sparse-coding layers) with
//!   hand-derived gradients, training, and leak taps.
//! - [`defenses`]: the defense catalog (noise at the leak, DP-style training,
//!   sparse architectures) keyed by canonical identifiers.
//! - [`attacks`]: surrogate inversion attacks against a leaked activation.
//! - [`metrics`]: PSNR / SSIM / Fréchet distance / accuracy / cluster
//!   separation.
//! - [`data`]: IDX image files, splits, synthetic blobs.
//! - [`experiment`]: config files, checkpoints, CSV reports, and the four
//!   pipeline commands the CLI wraps.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod lca;
pub mod data;
pub mod nn;
pub mod metrics;
pub mod defenses;
pub mod attacks;
pub mod experiment;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
