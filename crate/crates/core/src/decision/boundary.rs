use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{median, percentile, std_pop};

pub const DEFAULT_ALPHA: f64 = 1.5;
/// Error percentile complement, in percent: 5 selects the 95th percentile.
pub const DEFAULT_BETA: f64 = 5.0;

fn check_sign(sign: f64) -> Result<()> {
    if sign == 1.0 || sign == -1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("certificate sign must be ±1, got {sign}")))
    }
}

/// `median + sign·α·std` of the decision certificates. `sign = −1` for
/// likelihoods (low = OOD), `+1` when large values are OOD.
pub fn certificate_boundary(certs: &[f64], alpha: f64, sign: f64) -> Result<f64> {
    check_sign(sign)?;
    if certs.len() < 2 {
        return Err(Error::invalid(format!("boundary needs ≥ 2 decision samples, got {}", certs.len())));
    }
    if certs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericalOverflow { op: "certificate_boundary" });
    }
    Ok(median(certs) + sign * alpha * std_pop(certs))
}

/// `(100 − β)`th percentile of the decision errors, linearly interpolated.
pub fn error_boundary(errors: &[f64], beta: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("error boundary needs at least one error value"));
    }
    if !(beta > 0.0 && beta < 100.0) {
        return Err(Error::invalid(format!("β = {beta} must lie in (0, 100)")));
    }
    Ok(percentile(errors, 100.0 - beta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FineLabel {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "CD")]
    Cd,
    #[serde(rename = "OOD")]
    Ood,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Id => "ID",
            Label::Ood => "OOD",
        })
    }
}

impl fmt::Display for FineLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FineLabel::Id => "ID",
            FineLabel::Cd => "CD",
            FineLabel::Ood => "OOD",
        })
    }
}

/// Certificate and error thresholds with the statistics they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBoundary {
    /// Certificate threshold `l_b`.
    pub threshold: f64,
    /// Error threshold `e_b`, absent when the decision errors are unknown.
    pub error_threshold: Option<f64>,
    pub median: f64,
    pub std: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sign: f64,
    pub count: usize,
}

impl DecisionBoundary {
    pub fn fit(certs: &[f64], errors: Option<&[f64]>, alpha: f64, beta: f64, sign: f64) -> Result<Self> {
        let threshold = certificate_boundary(certs, alpha, sign)?;
        let error_threshold = errors.map(|e| error_boundary(e, beta)).transpose()?;
        Ok(Self {
            threshold,
            error_threshold,
            median: median(certs),
            std: std_pop(certs),
            alpha,
            beta,
            sign,
            count: certs.len(),
        })
    }

    /// Outer edge of the CD band, `2α·std` from the median.
    pub fn outer(&self) -> f64 {
        self.median + self.sign * 2.0 * self.alpha * self.std
    }

    fn beyond(&self, cert: f64, edge: f64) -> bool {
        if self.sign < 0.0 {
            cert <= edge
        } else {
            cert >= edge
        }
    }

    fn inside(&self, cert: f64) -> bool {
        if self.sign < 0.0 {
            cert >= self.threshold
        } else {
            cert <= self.threshold
        }
    }
}

/// Coarse and fine label of one certificate. A value exactly on `l_b` is ID.
pub fn classify(cert: f64, b: &DecisionBoundary) -> (Label, FineLabel) {
    if b.inside(cert) {
        (Label::Id, FineLabel::Id)
    } else if b.beyond(cert, b.outer()) {
        (Label::Ood, FineLabel::Ood)
    } else {
        (Label::Ood, FineLabel::Cd)
    }
}
