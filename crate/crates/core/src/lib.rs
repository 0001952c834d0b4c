//! Task-aware out-of-distribution certificates for regression models.
//!
//! A regression model `Ψ` and a score-based diffusion model over the joint
//! variable `z = (x, y)` are trained on the same data. For a new input the
//! joint log-likelihood `log p(x, Ψ(x))` is estimated along the
//! probability-flow ODE and used as a certificate: samples are classified as
//! in- or out-of-distribution against boundaries derived from a handful of
//! training-distribution samples, and an exponential error-vs-certificate fit
//! gives a-posteriori error bands.
//!
//! Layout:
//! - [`diffcore`]: tensors, reverse-mode differentiation, optimizers, checkpoints
//! - [`models`]: MLP / conv encoder-decoder zoo and the training harness
//! - [`diffusion`]: VE noise schedule, preconditioned denoiser, samplers
//! - [`likelihood`]: probability-flow likelihood and divergence estimators
//! - [`certificates`]: trajectory certificate family, OODC baseline, data transforms
//! - [`datagen`]: wave-equation, toy and Gaussian-oracle generators
//! - [`decision`]: boundaries, ID/CD/OOD labels, quadrant metrics, error fit

pub mod certificates;
pub mod datagen;
pub mod decision;
pub mod diffcore;
pub mod diffusion;
pub mod error;
pub mod likelihood;
pub mod models;
pub mod ode;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

/// Per-sample field values (inputs, predictions, joint states). Always double
/// precision; single precision is only used inside training graphs.
pub type Field = diffcore::Tensor<f64>;
