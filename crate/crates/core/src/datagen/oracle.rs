use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::labeled_stream;
use crate::Field;

/// Diagonal Gaussian `N(μ, diag(v))` with closed-form perturbed quantities.
///
/// Under VE noise of level σ the marginal is `N(μ, diag(v + σ²))`, so the
/// score and the optimal (posterior-mean) denoiser are exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let g = Self { mean, var };
        g.check()?;
        Ok(g)
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != self.var.len() || self.mean.is_empty() {
            return Err(Error::invalid("oracle mean and variance lengths differ"));
        }
        if let Some(v) = self.var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("oracle variance {v} must be positive")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_len(&self, z: &Field) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape("gaussian oracle", format!("{} values for dimension {}", z.len(), self.dim())));
        }
        Ok(())
    }

    /// `log p_σ(z)` of the VE-perturbed density (σ = 0 gives the data density).
    pub fn log_density_at(&self, z: &Field, sigma: f64) -> Result<f64> {
        self.check_len(z)?;
        let s2 = sigma * sigma;
        Ok(z.data()
            .iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&zi, (&m, &v))| {
                let var = v + s2;
                -0.5 * ((2.0 * PI * var).ln() + (zi - m) * (zi - m) / var)
            })
            .sum())
    }

    pub fn log_density(&self, z: &Field) -> Result<f64> {
        self.log_density_at(z, 0.0)
    }

    /// `∇ log p_σ(z) = −(z − μ)/(v + σ²)`.
    pub fn score(&self, z: &Field, sigma: f64) -> Result<Field> {
        self.check_len(z)?;
        let mut out = z.clone();
        for (o, (&m, &v)) in out.data_mut().iter_mut().zip(self.mean.iter().zip(&self.var)) {
            *o = -(*o - m) / (v + sigma * sigma);
        }
        Ok(out)
    }

    /// Posterior mean `E[z₀ | z]`: `μ + v/(v + σ²)·(z − μ)`.
    pub fn denoise(&self, z: &Field, sigma: f64) -> Result<Field> {
        self.check_len(z)?;
        let mut out = z.clone();
        for (o, (&m, &v)) in out.data_mut().iter_mut().zip(self.mean.iter().zip(&self.var)) {
            *o = m + v / (v + sigma * sigma) * (*o - m);
        }
        Ok(out)
    }

    /// `n` draws as a `[n, d]` batch.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor<f64>> {
        self.check()?;
        let d = self.dim();
        let mut rng = labeled_stream(seed, "gaussian-oracle", 0);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for (&m, &v) in self.mean.iter().zip(&self.var) {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(m + v.sqrt() * e);
            }
        }
        Tensor::new(vec![n, d], data)
    }

    /// Draws as a dataset; the first `⌈d/2⌉` coordinates are the input channels.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let joint = self.sample(n, seed)?;
        let d = self.dim();
        Dataset::new("gaussian-oracle", joint, d - d / 2, vec![json!({}); n])
    }
}
