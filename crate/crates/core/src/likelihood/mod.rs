//! Joint log-likelihood along the probability-flow ODE.
//!
//! The state `z` is integrated forward in noise level (`t: 0 → 1`) together
//! with the accumulator `∫ ½ g²(t) ∇·s(z(t); σ(t)) dt`, and
//! `log p₀(z) = log p₁(z(1)) − ∫ ½ g² ∇·s dt`.

mod divergence;
mod solve;

pub use divergence::{divergence, fd_step, rademacher_probes, Estimator};
pub use solve::{
    certify_jlbc, certify_mixed_ar, log_likelihood, log_likelihood_at, log_prior, mixed_ar_combine, DivergenceMode,
    LikelihoodResult, ProbeDist, SolverConfig, Trajectory, TrajectoryPoint,
};
pub(crate) use solve::{joint_likelihood, regressor_cond};
