use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::NoiseSchedule;
use crate::datagen::{Dataset, GaussianOracle, Normalization};
use crate::diffcore::{Graph, ParamVars, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{fit, Conditioning, ModelCheckpoint, ModelKind, ModelSpec, Objective, TrainConfig};
use crate::rng::{derive, Rng};
use crate::Field;

/// Preconditioning of the denoiser backbone for data of standard deviation `σ_data`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precond {
    pub sigma_data: f64,
}

impl Default for Precond {
    fn default() -> Self {
        Self { sigma_data: 1.0 }
    }
}

impl Precond {
    pub fn c_skip(&self, s: f64) -> f64 {
        let d2 = self.sigma_data * self.sigma_data;
        d2 / (s * s + d2)
    }

    pub fn c_out(&self, s: f64) -> f64 {
        s * self.sigma_data / (s * s + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, s: f64) -> f64 {
        1.0 / (s * s + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, s: f64) -> f64 {
        s.ln() / 4.0
    }

    /// DSM weight `λ(σ) = (σ² + σ_data²)/(σ σ_data)²`.
    pub fn weight(&self, s: f64) -> f64 {
        (s * s + self.sigma_data * self.sigma_data) / (s * self.sigma_data).powi(2)
    }
}

/// A denoiser `D(z; σ)` over samples of a fixed shape.
pub trait Denoise: Sync {
    fn sample_shape(&self) -> Vec<usize>;

    fn schedule(&self) -> NoiseSchedule;

    fn sigma_data(&self) -> f64 {
        1.0
    }

    /// Denoises every row of `z [N, shape...]` at its own noise level.
    fn denoise_batch(&self, z: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>>;
}

fn check_batch(shape: &[usize], z: &Tensor<f64>, sigma: &[f64]) -> Result<()> {
    if z.shape().get(1..) != Some(shape) || sigma.len() != z.rows() {
        return Err(Error::shape(
            "denoise",
            format!("batch {:?} with {} noise levels, sample shape {shape:?}", z.shape(), sigma.len()),
        ));
    }
    Ok(())
}

/// `s(z; σ) = (D(z; σ) − z)/σ²` for every row.
pub fn score_batch<D: Denoise + ?Sized>(d: &D, z: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>> {
    let den = d.denoise_batch(z, sigma)?;
    if !den.is_finite() {
        return Err(Error::NumericalOverflow { op: "denoiser" });
    }
    let w = z.row_len();
    let mut out = den;
    for (i, (o, zi)) in out.data_mut().chunks_mut(w).zip(z.data().chunks(w)).enumerate() {
        let inv = 1.0 / (sigma[i] * sigma[i]);
        for (a, &b) in o.iter_mut().zip(zi) {
            *a = (*a - b) * inv;
        }
    }
    Ok(out)
}

/// Score of a single sample.
pub fn score<D: Denoise + ?Sized>(d: &D, z: &Field, sigma: f64) -> Result<Field> {
    let batch = Tensor::stack(std::slice::from_ref(z))?;
    Ok(score_batch(d, &batch, &[sigma])?.unstack().remove(0))
}

/// `mean_i λ(σ_i) ‖D(z_i + σ_i ε_i; σ_i) − z_i‖²`.
pub fn dsm_loss<D: Denoise + ?Sized>(d: &D, batch: &Tensor<f64>, sigmas: &[f64], noise: &Tensor<f64>) -> Result<f64> {
    if batch.shape() != noise.shape() || sigmas.len() != batch.rows() {
        return Err(Error::shape("dsm_loss", format!("batch {:?}, noise {:?}, {} σ", batch.shape(), noise.shape(), sigmas.len())));
    }
    let w = batch.row_len();
    let mut noisy = batch.clone();
    for (i, (row, e)) in noisy.data_mut().chunks_mut(w).zip(noise.data().chunks(w)).enumerate() {
        for (v, &ei) in row.iter_mut().zip(e) {
            *v += sigmas[i] * ei;
        }
    }
    let den = d.denoise_batch(&noisy, sigmas)?;
    let pc = Precond {
        sigma_data: d.sigma_data(),
    };
    let mut total = 0.0;
    for i in 0..batch.rows() {
        let sq: f64 = den.row(i).iter().zip(batch.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
        total += pc.weight(sigmas[i]) * sq;
    }
    Ok(total / batch.rows() as f64)
}

/// Closed-form optimal denoiser of a Gaussian, paired with a schedule.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub oracle: GaussianOracle,
    pub schedule: NoiseSchedule,
}

impl Denoise for OracleDenoiser {
    fn sample_shape(&self) -> Vec<usize> {
        vec![self.oracle.dim()]
    }

    fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    fn denoise_batch(&self, z: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>> {
        check_batch(&self.sample_shape(), z, sigma)?;
        let rows = z
            .unstack()
            .iter()
            .zip(sigma)
            .map(|(r, &s)| self.oracle.denoise(r, s))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&rows)
    }
}

/// Trained network denoiser `D = c_skip z + c_out F(c_in z, c_noise)`.
#[derive(Clone, Debug)]
pub struct NetDenoiser {
    pub checkpoint: ModelCheckpoint,
    schedule: NoiseSchedule,
    precond: Precond,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserExtra {
    schedule: NoiseSchedule,
    sigma_data: f64,
}

impl NetDenoiser {
    pub fn from_checkpoint(checkpoint: ModelCheckpoint) -> Result<Self> {
        if checkpoint.kind != ModelKind::Denoiser {
            return Err(Error::invalid(format!("expected a denoiser checkpoint, got {:?}", checkpoint.kind)));
        }
        let extra: DenoiserExtra = serde_json::from_value(checkpoint.extra.clone())?;
        extra.schedule.validate()?;
        Ok(Self {
            checkpoint,
            schedule: extra.schedule,
            precond: Precond {
                sigma_data: extra.sigma_data,
            },
        })
    }

    /// Joint-channel statistics the denoiser was trained under.
    pub fn normalization(&self) -> &Normalization {
        &self.checkpoint.normalization
    }
}

impl Denoise for NetDenoiser {
    fn sample_shape(&self) -> Vec<usize> {
        self.checkpoint.spec.input_shape.clone()
    }

    fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    fn sigma_data(&self) -> f64 {
        self.precond.sigma_data
    }

    fn denoise_batch(&self, z: &Tensor<f64>, sigma: &[f64]) -> Result<Tensor<f64>> {
        check_batch(&self.sample_shape(), z, sigma)?;
        let pc = self.precond;
        let w = z.row_len();
        let mut xin = z.clone();
        for (i, row) in xin.data_mut().chunks_mut(w).enumerate() {
            let c = pc.c_in(sigma[i]);
            row.iter_mut().for_each(|v| *v *= c);
        }
        let cond: Vec<f64> = sigma.iter().map(|&s| pc.c_noise(s)).collect();
        let f = self.checkpoint.spec.apply(self.checkpoint.weights(), &xin, Some(&cond))?;
        let mut out = f;
        for (i, (o, zi)) in out.data_mut().chunks_mut(w).zip(z.data().chunks(w)).enumerate() {
            let (cs, co) = (pc.c_skip(sigma[i]), pc.c_out(sigma[i]));
            for (a, &b) in o.iter_mut().zip(zi) {
                *a = cs * b + co * *a;
            }
        }
        Ok(out)
    }
}

/// Denoising score matching over normalized joint samples, σ log-uniform.
pub struct DenoiserObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: Tensor<f64>,
    pub schedule: NoiseSchedule,
    pub precond: Precond,
}

impl Objective for DenoiserObjective<'_> {
    fn len(&self) -> usize {
        self.data.rows()
    }

    fn loss<'p, T: Real>(&self, g: &mut Graph<'p, T>, p: &ParamVars, batch: &[usize], rng: &mut Rng) -> Result<Var> {
        let z = self.data.select_rows(batch);
        let b = batch.len();
        let w = z.row_len();
        let (lo, hi) = (self.schedule.sigma_min.ln(), self.schedule.sigma_max.ln());
        let sigmas: Vec<f64> = (0..b).map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp()).collect();
        let pc = self.precond;
        let mut xin = Vec::with_capacity(z.len());
        let mut target = Vec::with_capacity(z.len());
        for (i, row) in z.data().chunks(w).enumerate() {
            let s = sigmas[i];
            for &zi in row {
                let e: f64 = StandardNormal.sample(rng);
                let noisy = zi + s * e;
                xin.push(pc.c_in(s) * noisy);
                target.push(zi - pc.c_skip(s) * noisy);
            }
        }
        let x = g.constant(Tensor::new(z.shape().to_vec(), xin)?.cast());
        let tgt = g.constant(Tensor::new(z.shape().to_vec(), target)?.cast());
        let cond: Vec<f64> = sigmas.iter().map(|&s| pc.c_noise(s)).collect();
        let f = self.spec.forward(g, p, x, Some(&cond))?;
        let out = g.scale_rows(f, sigmas.iter().map(|&s| T::lit(pc.c_out(s))).collect())?;
        let d = g.sub(out, tgt)?;
        let sq = g.square(d)?;
        let weighted = g.scale_rows(sq, sigmas.iter().map(|&s| T::lit(pc.weight(s) / b as f64)).collect())?;
        g.sum(weighted)
    }
}

/// Trains a denoiser on `dataset` mapped through `norm` (use
/// `dataset.normalization` for data-derived statistics).
pub fn train_denoiser(
    spec: &ModelSpec,
    dataset: &Dataset,
    norm: &Normalization,
    schedule: NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    spec.validate()?;
    schedule.validate()?;
    if spec.conditioning != Conditioning::NoiseLevel {
        return Err(Error::invalid("denoiser spec must be conditioned on the noise level"));
    }
    if spec.input_shape != dataset.sample_shape() || spec.output_shape != dataset.sample_shape() {
        return Err(Error::shape(
            "train_denoiser",
            format!("spec {:?} → {:?}, samples {:?}", spec.input_shape, spec.output_shape, dataset.sample_shape()),
        ));
    }
    let precond = Precond::default();
    let obj = DenoiserObjective {
        spec,
        data: norm.normalize_batch(&dataset.joint)?,
        schedule,
        precond,
    };
    let init = spec.init(derive(cfg.seed, "denoiser-init"))?;
    let out = fit(&init, &obj, cfg)?;
    Ok(ModelCheckpoint {
        kind: ModelKind::Denoiser,
        spec: spec.clone(),
        train: cfg.clone(),
        normalization: norm.clone(),
        input_channels: dataset.input_channels,
        params: out.params,
        ema: out.ema,
        loss_curve: out.loss_curve,
        extra: json!({"schedule": schedule, "sigma_data": precond.sigma_data}),
    })
}
