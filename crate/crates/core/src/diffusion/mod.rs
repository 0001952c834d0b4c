//! Variance-exploding diffusion over the joint variable `z = (x, y)`.
//!
//! Time runs over `[0, 1]` with data at `t = 0` and the Gaussian prior
//! `N(0, σ_max² I)` at `t = 1`. The probability-flow drift is
//! `dz/dt = −½ (dσ²/dt) s(z; σ(t))`.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{dsm_loss, score, score_batch, train_denoiser, Denoise, DenoiserObjective, NetDenoiser, OracleDenoiser, Precond};
pub use sampler::{sample_ode, sample_sde};
pub use schedule::NoiseSchedule;
