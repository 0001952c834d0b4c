use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::labeled_stream;
use crate::Field;

/// Samples an `[1, s, s]` label channel, each pixel i.i.d. categorical with
/// probabilities `softmax(logits / temperature)`.
pub fn perturb_labels(logits: &[f64], resolution: usize, temperature: f64, seed: u64) -> Result<Field> {
    if logits.len() < 2 {
        return Err(Error::invalid("perturb_labels needs at least 2 classes"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NumericalOverflow { op: "perturb_labels" });
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in &w {
        acc += v / z;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    let mut rng = labeled_stream(seed, "perturb-labels", 0);
    Ok(Tensor::from_fn(&[1, resolution, resolution], |_| {
        let u: f64 = rng.random();
        cdf.iter().position(|&c| u < c).unwrap_or(last) as f64
    }))
}

/// Noise replacing non-semantic pixels during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskNoise {
    pub variance: f64,
    pub enabled: bool,
}

impl Default for MaskNoise {
    fn default() -> Self {
        Self {
            variance: 0.025,
            enabled: true,
        }
    }
}

/// Replaces every pixel with `mask == false` by a draw from `N(0, variance)`.
pub fn mask_noise(field: &Field, mask: &[bool], cfg: MaskNoise, seed: u64) -> Result<Field> {
    if mask.len() != field.len() {
        return Err(Error::shape(
            "mask_noise",
            format!("mask of {} pixels, field {:?}", mask.len(), field.shape()),
        ));
    }
    if !cfg.enabled {
        return Ok(field.clone());
    }
    let normal = Normal::new(0.0, cfg.variance.sqrt())
        .map_err(|_| Error::invalid(format!("noise variance {} must be non-negative", cfg.variance)))?;
    let mut rng = labeled_stream(seed, "mask-noise", 0);
    let mut out = field.clone();
    for (v, &keep) in out.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(out)
}
