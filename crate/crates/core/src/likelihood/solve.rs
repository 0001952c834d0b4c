use std::cell::RefCell;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::divergence::{rademacher_probes, score_and_divergence, Estimator};
use crate::certificates::{CertificateRecord, Method};
use crate::diffcore::Tensor;
use crate::diffusion::{score_batch, Denoise, NetDenoiser};
use crate::error::{Error, Result};
use crate::models::{predict, Conditioning, ModelCheckpoint};
use crate::ode::{integrate, OdeMethod};
use crate::Field;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceMode {
    ExactDense,
    #[default]
    Hutchinson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDist {
    #[default]
    Rademacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: OdeMethod,
    pub steps: usize,
    pub divergence: DivergenceMode,
    pub probes: usize,
    pub probe_dist: ProbeDist,
    /// Base of the central-difference step `ε = fd_epsilon·(1 + max|z|)`.
    pub fd_epsilon: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: OdeMethod::Rk38,
            steps: 64,
            divergence: DivergenceMode::Hutchinson,
            probes: 32,
            probe_dist: ProbeDist::Rademacher,
            fd_epsilon: 1e-3,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 8 {
            return Err(Error::invalid(format!("steps ≥ 8 required, got {}", self.steps)));
        }
        if self.probes == 0 {
            return Err(Error::invalid("probes must be ≥ 1"));
        }
        if !(self.fd_epsilon > 0.0) {
            return Err(Error::invalid("fd epsilon must be positive"));
        }
        Ok(())
    }
}

/// State `z_k` and rescaled score `ε_k = −σ(t_k)·s(z_k; σ(t_k))` at one ODE node.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub z: Field,
    pub eps: Field,
}

/// ODE nodes in increasing `t`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[0].t < w[1].t)) {
            return Err(Error::invalid("trajectory times must increase strictly"));
        }
        if points.iter().any(|p| p.z.shape() != p.eps.shape()) {
            return Err(Error::invalid("ε must have the shape of z"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodResult {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub divergence_integral: f64,
    pub trajectory: Trajectory,
}

/// `log N(z; 0, σ_max² I)` with `d` = element count of `z`.
pub fn log_prior(z: &Field, sigma_max: f64) -> f64 {
    let d = z.len() as f64;
    let s2 = sigma_max * sigma_max;
    -0.5 * d * (2.0 * PI * s2).ln() - 0.5 * z.sq_norm() / s2
}

/// [`log_likelihood_at`] on stream 0.
pub fn log_likelihood<D: Denoise + ?Sized>(d: &D, z: &Field, cfg: &SolverConfig) -> Result<LikelihoodResult> {
    log_likelihood_at(d, z, cfg, 0)
}

/// Joint log-likelihood of a normalized state `z`. Probes are drawn once for
/// the whole trajectory from stream `(cfg.seed, id)`.
pub fn log_likelihood_at<D: Denoise + ?Sized>(d: &D, z: &Field, cfg: &SolverConfig, id: u64) -> Result<LikelihoodResult> {
    cfg.validate()?;
    if z.shape() != d.sample_shape().as_slice() {
        return Err(Error::shape("log_likelihood", format!("z {:?}, denoiser {:?}", z.shape(), d.sample_shape())));
    }
    let sched = d.schedule();
    let n = z.len();
    let probes = match cfg.divergence {
        DivergenceMode::ExactDense => Vec::new(),
        DivergenceMode::Hutchinson => rademacher_probes(n, cfg.probes, cfg.seed, id),
    };
    let est = match cfg.divergence {
        DivergenceMode::ExactDense => Estimator::Exact,
        DivergenceMode::Hutchinson => Estimator::Hutchinson(&probes),
    };
    let shape = z.shape().to_vec();
    let last_eps: RefCell<Vec<f64>> = RefCell::new(Vec::new());
    let points: RefCell<Vec<TrajectoryPoint>> = RefCell::new(Vec::new());

    let numeric_at = |t: f64| move |e: Error| if e.is_numeric() { Error::Diverged { t } } else { e };

    let rhs = |t: f64, y: &[f64], stage: usize| -> Result<Vec<f64>> {
        let sigma = sched.sigma_at(t);
        let zt = Tensor::new(shape.clone(), y[..n].to_vec())?;
        let (s, div) = score_and_divergence(
            |b: &Tensor<f64>| score_batch(d, b, &vec![sigma; b.rows()]),
            &zt,
            est,
            cfg.fd_epsilon,
        )
        .map_err(numeric_at(t))?;
        if !div.is_finite() {
            return Err(Error::Diverged { t });
        }
        if stage == 0 {
            *last_eps.borrow_mut() = s.iter().map(|v| -sigma * v).collect();
        }
        let half_g2 = 0.5 * sched.g2(t);
        let mut out: Vec<f64> = s.iter().map(|v| -half_g2 * v).collect();
        out.push(half_g2 * div);
        Ok(out)
    };
    let observe = |t: f64, y: &[f64], first: Option<&[f64]>| -> Result<()> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { t });
        }
        let zt = Tensor::new(shape.clone(), y[..n].to_vec())?;
        let eps = match first {
            Some(_) => last_eps.borrow().clone(),
            None => {
                let sigma = sched.sigma_at(t);
                let one = Tensor::new(
                    std::iter::once(1).chain(shape.iter().copied()).collect(),
                    y[..n].to_vec(),
                )?;
                let s = score_batch(d, &one, &[sigma]).map_err(numeric_at(t))?;
                s.data().iter().map(|v| -sigma * v).collect()
            }
        };
        points.borrow_mut().push(TrajectoryPoint {
            t,
            z: zt,
            eps: Tensor::new(shape.clone(), eps)?,
        });
        Ok(())
    };
    let mut y0 = z.data().to_vec();
    y0.push(0.0);
    let y1 = integrate(cfg.method, y0, 0.0, 1.0, cfg.steps, rhs, observe)?;
    let z1 = Tensor::new(shape.clone(), y1[..n].to_vec())?;
    let lp = log_prior(&z1, sched.sigma_max);
    let di = y1[n];
    let ll = lp - di;
    if !ll.is_finite() {
        return Err(Error::Diverged { t: 1.0 });
    }
    Ok(LikelihoodResult {
        log_likelihood: ll,
        log_prior: lp,
        divergence_integral: di,
        trajectory: Trajectory::new(points.into_inner())?,
    })
}

/// Lead time a conditioned regressor is evaluated at (`extra.lead_time`).
pub(crate) fn regressor_cond(ck: &ModelCheckpoint) -> Result<Option<f64>> {
    match ck.spec.conditioning {
        Conditioning::None => Ok(None),
        Conditioning::LeadTime => ck
            .extra
            .get("lead_time")
            .and_then(|v| v.as_f64())
            .map(Some)
            .ok_or_else(|| Error::invalid("lead-time regressor checkpoint lacks extra.lead_time")),
        Conditioning::NoiseLevel => Err(Error::invalid("regressor cannot be noise-level conditioned")),
    }
}

/// Likelihood of the raw pair `(x, y)` under the denoiser's normalization.
pub(crate) fn joint_likelihood(d: &NetDenoiser, x: &Field, y: &Field, cfg: &SolverConfig, id: u64) -> Result<LikelihoodResult> {
    let z = Tensor::concat_channels(x, y)?;
    let zn = d.normalization().normalize(&z)?;
    log_likelihood_at(d, &zn, cfg, id)
}

/// JLBC certificate `log p(x, Ψ(x))` of sample `id`.
pub fn certify_jlbc(regressor: &ModelCheckpoint, d: &NetDenoiser, x: &Field, cfg: &SolverConfig, id: u64) -> Result<CertificateRecord> {
    let y = predict(regressor, x, regressor_cond(regressor)?)?;
    let res = joint_likelihood(d, x, &y, cfg, id)?;
    Ok(CertificateRecord::new(id, Method::Jlbc, res.log_likelihood))
}

/// `½ L(x, y_dir) + ½ L(x, y_ar)` with the likelihood supplied by `ll`.
pub fn mixed_ar_combine<F>(x: &Field, y_dir: &Field, y_ar: &Field, mut ll: F) -> Result<f64>
where
    F: FnMut(&Field, &Field) -> Result<f64>,
{
    let a = ll(x, y_dir)?;
    let b = ll(x, y_ar)?;
    Ok(0.5 * a + 0.5 * b)
}

/// Mixed direct/autoregressive certificate. The regressor must be lead-time
/// conditioned; `y_AR` applies it `ar_steps` times with lead time `T/ar_steps`.
pub fn certify_mixed_ar(
    regressor: &ModelCheckpoint,
    d: &NetDenoiser,
    x: &Field,
    ar_steps: usize,
    cfg: &SolverConfig,
    id: u64,
) -> Result<CertificateRecord> {
    if regressor.spec.conditioning != Conditioning::LeadTime {
        return Err(Error::invalid("mixed autoregressive certificate needs a lead-time conditioned regressor"));
    }
    if ar_steps == 0 {
        return Err(Error::invalid("ar_steps must be ≥ 1"));
    }
    let lead = regressor_cond(regressor)?.expect("lead-time conditioned");
    let y_dir = predict(regressor, x, Some(lead))?;
    let y_ar = if ar_steps == 1 {
        y_dir.clone()
    } else {
        if regressor.spec.input_shape != regressor.spec.output_shape {
            return Err(Error::shape("certify_mixed_ar", "autoregression needs equal input and output shapes"));
        }
        let dt = lead / ar_steps as f64;
        let mut state = x.clone();
        for _ in 0..ar_steps {
            state = predict(regressor, &state, Some(dt))?;
        }
        state
    };
    let c = mixed_ar_combine(x, &y_dir, &y_ar, |x, y| joint_likelihood(d, x, y, cfg, id).map(|r| r.log_likelihood))?;
    Ok(CertificateRecord::new(id, Method::JlbcMixedAr, c))
}
