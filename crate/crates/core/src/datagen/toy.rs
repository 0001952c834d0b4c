use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::labeled_stream;

/// Regression targets for the bimodal-input toy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyFunction {
    Linear,
    Quadratic,
    Sine,
}

impl ToyFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ToyFunction::Linear => x,
            ToyFunction::Quadratic => x * x,
            ToyFunction::Sine => (PI * x).sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Mode {
    fn centre(self) -> f64 {
        match self {
            Mode::Plus => 1.0,
            Mode::Minus => -1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Mode::Plus => "+",
            Mode::Minus => "-",
        }
    }
}

/// Inputs from `N(+1, v)` (`N₊` draws) and `N(−1, v)` (`round(ν N₊)` draws),
/// targets `f(x) + ε`, `ε ~ N(0, noise_var)`. Variances, not standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimodalSpec {
    pub nu: f64,
    pub n_plus: usize,
    #[serde(default = "default_mode_var")]
    pub mode_var: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    pub f: ToyFunction,
}

fn default_mode_var() -> f64 {
    0.5
}

fn default_noise_var() -> f64 {
    0.1
}

impl BimodalSpec {
    pub fn new(nu: f64, n_plus: usize, f: ToyFunction) -> Self {
        Self {
            nu,
            n_plus,
            mode_var: default_mode_var(),
            noise_var: default_noise_var(),
            f,
        }
    }

    pub fn n_minus(&self) -> usize {
        (self.nu * self.n_plus as f64).round() as usize
    }

    fn check(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::invalid(format!("ν = {} outside (0, 1]", self.nu)));
        }
        if self.n_plus == 0 {
            return Err(Error::invalid("N₊ must be ≥ 1"));
        }
        if !(self.mode_var > 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::invalid("variances must be positive"));
        }
        Ok(())
    }
}

fn pairs_dataset(tag: &str, xs: &[f64], ys: &[f64], meta: Vec<serde_json::Value>) -> Result<Dataset> {
    let data = xs.iter().zip(ys).flat_map(|(&x, &y)| [x, y]).collect();
    Dataset::new(tag, Tensor::new(vec![xs.len(), 2], data)?, 1, meta)
}

fn draw_mode(spec: &BimodalSpec, mode: Mode, n: usize, seed: u64, label: &str, noisy: bool) -> (Vec<f64>, Vec<f64>) {
    let mut rng = labeled_stream(seed, label, 0);
    let input = Normal::new(mode.centre(), spec.mode_var.sqrt()).expect("positive variance");
    let noise = Normal::new(0.0, spec.noise_var.sqrt()).expect("non-negative variance");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = input.sample(&mut rng);
        let eps = if noisy { noise.sample(&mut rng) } else { 0.0 };
        xs.push(x);
        ys.push(spec.f.eval(x) + eps);
    }
    (xs, ys)
}

/// Training set: `N₊` "+" samples followed by `round(ν N₊)` "−" samples.
pub fn gen_toy_bimodal(spec: &BimodalSpec, seed: u64) -> Result<Dataset> {
    spec.check()?;
    let (mut xs, mut ys) = draw_mode(spec, Mode::Plus, spec.n_plus, seed, "bimodal+", true);
    let (xm, ym) = draw_mode(spec, Mode::Minus, spec.n_minus(), seed, "bimodal-", true);
    xs.extend(xm);
    ys.extend(ym);
    let meta = (0..xs.len())
        .map(|i| json!({"mode": if i < spec.n_plus { "+" } else { "-" }}))
        .collect();
    pairs_dataset("toy-bimodal", &xs, &ys, meta)
}

/// Evaluation set of one mode with noiseless targets `f(x)`.
pub fn bimodal_test_set(spec: &BimodalSpec, mode: Mode, n: usize, seed: u64) -> Result<Dataset> {
    spec.check()?;
    let label = format!("bimodal-test{}", mode.tag());
    let (xs, ys) = draw_mode(spec, mode, n, seed, &label, false);
    pairs_dataset("toy-bimodal", &xs, &ys, vec![json!({"mode": mode.tag()}); n])
}

/// `sin(πx/2)` for `x < 0`, `sin(25πx)` for `x ≥ 0`.
pub fn piecewise_sine(x: f64) -> f64 {
    if x < 0.0 {
        (PI * x / 2.0).sin()
    } else {
        (25.0 * PI * x).sin()
    }
}

/// Noiseless pairs `(x, f(x))`, `x ~ U(−1, 1)`.
pub fn gen_toy_piecewise_sine(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("N must be ≥ 1"));
    }
    let mut rng = labeled_stream(seed, "piecewise-sine", 0);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| piecewise_sine(x)).collect();
    let meta = xs.iter().map(|&x| json!({"x": x})).collect();
    pairs_dataset("toy-piecewise-sine", &xs, &ys, meta)
}
