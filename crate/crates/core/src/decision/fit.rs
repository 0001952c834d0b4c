use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, percentile};

pub const DEFAULT_BAND_PERCENTILE: f64 = 75.0;
const MAX_ITER: usize = 200;

/// `y(x) = a·exp(−b·(x − x0)) + c` with a symmetric deviation band.
///
/// `x0` is 0 unless folding the centring shift into `a` would overflow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(default)]
    pub x0: f64,
    pub band: f64,
    pub band_percentile: f64,
    pub count: usize,
    pub converged: bool,
}

impl ErrorFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.a * (-self.b * (x - self.x0)).exp() + self.c
    }
}

/// `(estimate, lower, upper)` with the lower bound clamped at 0.
pub fn predict_error(fit: &ErrorFit, cert: f64) -> (f64, f64, f64) {
    let e = fit.eval(cert);
    (e, (e - fit.band).max(0.0), e + fit.band)
}

fn sse(x: &[f64], y: &[f64], p: [f64; 3]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = p[0] * (-p[1] * xi).exp() + p[2] - yi;
            r * r
        })
        .sum()
}

/// Solves the 3×3 system `m·v = r` by partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut v = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| m[row][k] * v[k]).sum();
        v[row] = (r[row] - s) / m[row][row];
    }
    v.iter().all(|x| x.is_finite()).then_some(v)
}

/// Log-regression start: `c₀ = 0.9·min y`, then a line through `ln(y − c₀)`.
fn initial(x: &[f64], y: &[f64]) -> Option<[f64; 3]> {
    let c0 = 0.9 * y.iter().copied().fold(f64::INFINITY, f64::min);
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, &yi)| yi - c0 > 0.0)
        .map(|(&xi, &yi)| (xi, (yi - c0).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some([(my - slope * mx).exp(), -slope, c0])
}

/// Gauss–Newton with step halving on centred abscissae. Returns the best
/// parameters seen and whether the iteration settled.
fn gauss_newton(x: &[f64], y: &[f64], mut p: [f64; 3]) -> ([f64; 3], bool) {
    let mut best = sse(x, y, p);
    for _ in 0..MAX_ITER {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&xi, &yi) in x.iter().zip(y) {
            let e = (-p[1] * xi).exp();
            let j = [e, -p[0] * xi * e, 1.0];
            let r = p[0] * e + p[2] - yi;
            for a in 0..3 {
                jtr[a] -= j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let Some(step) = solve3(jtj, jtr) else {
            return (p, false);
        };
        let mut lambda = 1.0;
        let mut improved = None;
        for _ in 0..40 {
            let q = [p[0] + lambda * step[0], p[1] + lambda * step[1], p[2] + lambda * step[2]];
            let s = sse(x, y, q);
            if s.is_finite() && s < best {
                improved = Some((q, s));
                break;
            }
            lambda *= 0.5;
        }
        let Some((q, s)) = improved else {
            return (p, true);
        };
        let rel = (best - s) / best.max(f64::MIN_POSITIVE);
        p = q;
        best = s;
        if rel < 1e-15 || best == 0.0 {
            return (p, true);
        }
    }
    (p, false)
}

/// Least-squares fit of `y = a·exp(−b·x) + c` to (certificate, error)
/// pairs; the band is the `band_percentile`th percentile of `|fit − error|`.
pub fn fit_error_curve(certs: &[f64], errors: &[f64], band_percentile: f64) -> Result<ErrorFit> {
    if certs.len() != errors.len() {
        return Err(Error::shape("fit_error_curve", format!("{} certificates, {} errors", certs.len(), errors.len())));
    }
    if certs.len() < 8 {
        return Err(Error::invalid(format!("error fit needs ≥ 8 points, got {}", certs.len())));
    }
    if errors.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) || certs.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("error fit needs finite certificates and non-negative errors"));
    }
    if !(0.0..=100.0).contains(&band_percentile) {
        return Err(Error::invalid(format!("band percentile {band_percentile} outside [0, 100]")));
    }
    let xm = mean(certs);
    let xc: Vec<f64> = certs.iter().map(|c| c - xm).collect();
    let flat = [0.0, 0.0, mean(errors)];
    let mut p = flat;
    let mut converged = true;
    if let Some(init) = initial(&xc, errors) {
        let (q, ok) = gauss_newton(&xc, errors, init);
        if sse(&xc, errors, q) < sse(&xc, errors, flat) {
            p = q;
            converged = ok;
        }
    }
    if !converged {
        log::warn!("error fit did not converge in {MAX_ITER} iterations; using best iterate");
    }
    let (mut a, mut x0) = (p[0], xm);
    let folded = p[0] * (p[1] * xm).exp();
    if folded.is_finite() && (folded != 0.0 || p[0] == 0.0) {
        a = folded;
        x0 = 0.0;
    }
    let mut fit = ErrorFit {
        a,
        b: p[1],
        c: p[2],
        x0,
        band: 0.0,
        band_percentile,
        count: certs.len(),
        converged,
    };
    let dev: Vec<f64> = certs.iter().zip(errors).map(|(&x, &e)| (fit.eval(x) - e).abs()).collect();
    fit.band = percentile(&dev, band_percentile);
    Ok(fit)
}
