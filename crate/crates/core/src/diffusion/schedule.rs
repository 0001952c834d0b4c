use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential schedule `σ(t) = σ_min (σ_max/σ_min)^t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let s = Self { sigma_min, sigma_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "noise schedule needs 0 < σ_min < σ_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    /// `ln(σ_max/σ_min)`.
    pub fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
        }
        Ok(self.sigma_at(t))
    }

    pub(crate) fn sigma_at(&self, t: f64) -> f64 {
        if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            self.sigma_min * (t * self.log_ratio()).exp()
        }
    }

    /// `dσ²/dt = 2 σ(t)² ln(σ_max/σ_min)`.
    pub fn g2(&self, t: f64) -> f64 {
        let s = self.sigma_at(t);
        2.0 * s * s * self.log_ratio()
    }
}
