use serde::{Deserialize, Serialize};

use super::{CertificateRecord, Method, Trajectory};
use crate::diffusion::NetDenoiser;
use crate::error::{Error, Result};
use crate::likelihood::{joint_likelihood, regressor_cond, LikelihoodResult, SolverConfig};
use crate::models::{predict, ModelCheckpoint};
use crate::Field;

/// `a = α‖Σ_k ε_k‖^p + β‖Σ_k ∂ε/∂t‖^p + γ Σ_k ‖ε_k‖^p` with toggles α, β, γ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateMethod {
    pub tag: Method,
    pub alpha: bool,
    pub beta: bool,
    pub gamma: bool,
    pub p: f64,
}

impl CertificateMethod {
    /// Preset toggles of a family member with exponent `p`.
    pub fn preset(tag: Method, p: f64) -> Result<Self> {
        let (alpha, beta, gamma) = match tag {
            Method::JDPath => (false, true, false),
            Method::Jsbddm => (true, true, false),
            Method::Jsfns => (true, false, false),
            Method::Jmssm => (false, false, true),
            other => return Err(Error::invalid(format!("{other} is not a trajectory-family method"))),
        };
        Ok(Self {
            tag,
            alpha,
            beta,
            gamma,
            p,
        })
    }

    pub fn presets(p: f64) -> Vec<Self> {
        [Method::JDPath, Method::Jsbddm, Method::Jsfns, Method::Jmssm]
            .into_iter()
            .map(|m| Self::preset(m, p).expect("family tag"))
            .collect()
    }
}

fn norm_p(v: &[f64], p: f64) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().powf(p)
}

fn accumulate(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += scale * b;
    }
}

/// Evaluates the toggled sum over a trajectory. `∂ε/∂t` uses forward
/// differences on the trajectory grid.
pub fn unified_certificate(traj: &Trajectory, method: &CertificateMethod) -> Result<f64> {
    let pts = &traj.points;
    if pts.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    if !(method.p > 0.0) {
        return Err(Error::invalid(format!("norm exponent p = {} must be positive", method.p)));
    }
    let n = pts[0].eps.len();
    let mut total = 0.0;
    if method.alpha {
        let mut sum = vec![0.0; n];
        for pt in pts {
            accumulate(&mut sum, pt.eps.data(), 1.0);
        }
        total += norm_p(&sum, method.p);
    }
    if method.beta {
        if pts.len() < 2 {
            return Err(Error::invalid("time-derivative term needs at least 2 trajectory points"));
        }
        let mut sum = vec![0.0; n];
        for w in pts.windows(2) {
            let inv = 1.0 / (w[1].t - w[0].t);
            accumulate(&mut sum, w[1].eps.data(), inv);
            accumulate(&mut sum, w[0].eps.data(), -inv);
        }
        total += norm_p(&sum, method.p);
    }
    if method.gamma {
        total += pts.iter().map(|pt| norm_p(pt.eps.data(), method.p)).sum::<f64>();
    }
    Ok(total)
}

/// Runs one probability-flow trajectory per sample and derives every
/// requested certificate from it.
#[derive(Clone, Debug)]
pub struct Certifier<'a> {
    pub regressor: &'a ModelCheckpoint,
    pub denoiser: &'a NetDenoiser,
    pub solver: SolverConfig,
    /// Norm exponent of the family certificates.
    pub p: f64,
}

impl Certifier<'_> {
    pub fn trajectory(&self, x: &Field, id: u64) -> Result<(Field, LikelihoodResult)> {
        let y = predict(self.regressor, x, regressor_cond(self.regressor)?)?;
        let res = joint_likelihood(self.denoiser, x, &y, &self.solver, id)?;
        Ok((y, res))
    }

    /// Records for `methods` (JLBC or family members) of sample `id`,
    /// plus the regressor's prediction.
    pub fn certify(&self, x: &Field, methods: &[Method], id: u64) -> Result<(Field, Vec<CertificateRecord>)> {
        let (y, res) = self.trajectory(x, id)?;
        let recs = methods
            .iter()
            .map(|&m| match m {
                Method::Jlbc => Ok(CertificateRecord::new(id, m, res.log_likelihood)),
                m if m.is_family() => {
                    let cm = CertificateMethod::preset(m, self.p)?;
                    Ok(CertificateRecord::new(id, m, unified_certificate(&res.trajectory, &cm)?))
                }
                other => Err(Error::invalid(format!("{other} is not computed from a trajectory"))),
            })
            .collect::<Result<_>>()?;
        Ok((y, recs))
    }
}

/// Family certificate of sample `id`; `JLBC` is routed to the likelihood.
pub fn certify_family(
    regressor: &ModelCheckpoint,
    denoiser: &NetDenoiser,
    x: &Field,
    method: &CertificateMethod,
    cfg: &SolverConfig,
    id: u64,
) -> Result<CertificateRecord> {
    let c = Certifier {
        regressor,
        denoiser,
        solver: cfg.clone(),
        p: method.p,
    };
    let (_, res) = c.trajectory(x, id)?;
    match method.tag {
        Method::Jlbc => Ok(CertificateRecord::new(id, Method::Jlbc, res.log_likelihood)),
        Method::Oodc | Method::JlbcMixedAr => Err(Error::invalid(format!("{} is not a family method", method.tag))),
        tag => Ok(CertificateRecord::new(id, tag, unified_certificate(&res.trajectory, method)?)),
    }
}
