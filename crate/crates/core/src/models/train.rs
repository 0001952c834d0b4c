use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ema_update, grad, AdamConfig, Graph, OptState, ParamSet, ParamVars, Real, Var};
use crate::error::{Error, Result};
use crate::rng::{labeled_stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Pointwise regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub loss: LossKind,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_ema() -> f64 {
    0.999
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            schedule: LrSchedule::Constant,
            optimizer: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            ema_decay: default_ema(),
            seed: 0,
            precision: Precision::F32,
            loss: LossKind::L1,
            grad_clip: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::invalid(format!("batch size {} must lie in 1..={n}", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr;
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// A training loss over an indexed sample collection.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    /// Scalar loss of the rows `batch`. `rng` supplies any per-step noise.
    fn loss<'p, T: Real>(&self, g: &mut Graph<'p, T>, params: &ParamVars, batch: &[usize], rng: &mut Rng) -> Result<Var>;
}

/// Final and EMA parameters plus the mean training loss of each epoch.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub params: ParamSet<f64>,
    pub ema: ParamSet<f64>,
    pub loss_curve: Vec<f64>,
}

/// AdamW on minibatches, reshuffled every epoch, with an EMA shadow.
pub fn fit<O: Objective>(init: &ParamSet<f64>, obj: &O, cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate(obj.len())?;
    match cfg.precision {
        Precision::F32 => fit_typed::<f32, O>(init, obj, cfg),
        Precision::F64 => fit_typed::<f64, O>(init, obj, cfg),
    }
}

fn clip<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}

fn fit_typed<T: Real, O: Objective>(init: &ParamSet<f64>, obj: &O, cfg: &TrainConfig) -> Result<FitOutput> {
    let n = obj.len();
    let mut params: ParamSet<T> = init.cast();
    let mut ema = params.clone();
    let mut opt = OptState::new(&params, cfg.optimizer);
    let mut rng = labeled_stream(cfg.seed, "train", 0);
    let batches = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = match grad(&params, |g, p| obj.loss(g, p, batch, &mut rng)) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => return Err(Error::TrainingDiverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let loss = loss.f64();
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            let lr = cfg.lr_at(step, total);
            opt.adam_step_lr(&mut params, &grads, lr)?;
            if !params.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            // Warm-up keeps the shadow from anchoring on the random init.
            let decay = cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            ema_update(&mut ema, &params, decay)?;
            acc += loss * batch.len() as f64;
            step += 1;
        }
        let mean = acc / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok(FitOutput {
        params: params.cast(),
        ema: ema.cast(),
        loss_curve: curve,
    })
}
