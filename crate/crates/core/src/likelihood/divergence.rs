use rand::Rng as _;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::labeled_stream;
use crate::Field;

/// Largest exact dimension handled by axis-aligned differences.
pub const EXACT_MAX_DIM: usize = 64;

/// Divergence estimator: coordinate axes (exact trace) or fixed probe vectors.
#[derive(Clone, Copy, Debug)]
pub enum Estimator<'a> {
    Exact,
    Hutchinson(&'a [Vec<f64>]),
}

/// Central-difference step for state `z`: the power of two at or below
/// `base·(1 + max|z|)`. Powers of two keep `z ± εv` exact for ±1 probes in the
/// common case.
pub fn fd_step(z: &[f64], base: f64) -> f64 {
    let m = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let raw = base * (1.0 + m);
    2f64.powi(raw.log2().floor() as i32)
}

/// `count` Rademacher vectors of length `d` for trajectory `id`.
pub fn rademacher_probes(d: usize, count: usize, seed: u64, id: u64) -> Vec<Vec<f64>> {
    let mut rng = labeled_stream(seed, "probes", id);
    (0..count)
        .map(|_| (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect()
}

/// Evaluates `score` on `z` and on `z ± εv` for every direction in one batch.
/// Returns `(s(z), ∇·s(z))`.
pub(crate) fn score_and_divergence<F>(score: F, z: &Field, est: Estimator, fd_base: f64) -> Result<(Vec<f64>, f64)>
where
    F: FnOnce(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let d = z.len();
    let zs = z.data();
    let eps = fd_step(zs, fd_base);
    let dirs = match est {
        Estimator::Exact => {
            if d > EXACT_MAX_DIM {
                return Err(Error::invalid(format!(
                    "exact divergence needs dimension ≤ {EXACT_MAX_DIM}, got {d}"
                )));
            }
            d
        }
        Estimator::Hutchinson(p) => {
            if p.is_empty() || p.iter().any(|v| v.len() != d) {
                return Err(Error::shape("divergence", format!("probes must be non-empty of length {d}")));
            }
            p.len()
        }
    };
    let dir = |k: usize, i: usize| -> f64 {
        match est {
            Estimator::Exact => f64::from(u8::from(k == i)),
            Estimator::Hutchinson(p) => p[k][i],
        }
    };
    let mut data = Vec::with_capacity((1 + 2 * dirs) * d);
    data.extend_from_slice(zs);
    for k in 0..dirs {
        data.extend((0..d).map(|i| zs[i] + eps * dir(k, i)));
        data.extend((0..d).map(|i| zs[i] - eps * dir(k, i)));
    }
    let mut shape = vec![1 + 2 * dirs];
    shape.extend_from_slice(z.shape());
    let s = score(&Tensor::new(shape, data)?)?;
    let mut total = 0.0;
    for k in 0..dirs {
        let (plus, minus) = (s.row(1 + 2 * k), s.row(2 + 2 * k));
        let mut dot = 0.0;
        for i in 0..d {
            dot += dir(k, i) * (plus[i] - minus[i]);
        }
        total += dot / (2.0 * eps);
    }
    let div = match est {
        Estimator::Exact => total,
        Estimator::Hutchinson(_) => total / dirs as f64,
    };
    Ok((s.row(0).to_vec(), div))
}

/// `∇·s(z)` by central differences along coordinate axes (exact trace) or the
/// Hutchinson mean `vᵀ(s(z+εv) − s(z−εv))/(2ε)` over the given probes.
/// `score` maps a batch `[B, shape...]` to scores of the same shape.
pub fn divergence<F>(score: F, z: &Field, est: Estimator, fd_base: f64) -> Result<f64>
where
    F: FnOnce(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    score_and_divergence(score, z, est, fd_base).map(|(_, d)| d)
}
