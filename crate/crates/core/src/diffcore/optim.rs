use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates and step counter for [`OptState::adam_step`].
#[derive(Clone, Debug)]
pub struct OptState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One AdamW update with learning rate `lr` (overriding `config.lr`, for schedules).
    /// Bias-corrected moments; weight decay is decoupled from the gradient.
    pub fn adam_step_lr(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        params.check_aligned(grads, "adam_step")?;
        params.check_aligned(&self.m, "adam_step")?;
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let decay = T::lit(lr * c.weight_decay);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] - decay * pd[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn adam_step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        let lr = self.config.lr;
        self.adam_step_lr(params, grads, lr)
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
///
/// `decay` must lie in `[0, 1]`: 0 copies `params`, 1 freezes `shadow`.
pub fn ema_update<T: Real>(shadow: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) || decay.is_nan() {
        return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
    }
    shadow.check_aligned(params, "ema_update")?;
    let d = T::lit(decay);
    let one_d = T::one() - d;
    for ((_, s), (_, p)) in shadow.iter_mut().zip(params.iter()) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + one_d * pv;
        }
    }
    Ok(())
}
