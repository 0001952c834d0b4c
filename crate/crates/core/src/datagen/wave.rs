use std::f64::consts::PI;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Dataset;
use crate::diffcore::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::rng::labeled_stream;
use crate::Field;

/// One initial condition of the 2D wave problem on `[0,1]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveParams {
    pub k: usize,
    pub r: f64,
    /// `a_ij` for `i, j ∈ 1..=k`, row-major in `i`.
    pub coeffs: Vec<f64>,
    pub c: f64,
    pub resolution: usize,
}

/// Cell-centred nodes `(i + 0.5)/s`.
pub fn grid_nodes(s: usize) -> Vec<f64> {
    (0..s).map(|i| (i as f64 + 0.5) / s as f64).collect()
}

impl WaveParams {
    fn check(&self) -> Result<()> {
        if self.k == 0 || self.coeffs.len() != self.k * self.k || self.resolution == 0 {
            return Err(Error::invalid(format!(
                "wave params: K = {}, {} coefficients, resolution {}",
                self.k,
                self.coeffs.len(),
                self.resolution
            )));
        }
        Ok(())
    }

    /// Mode amplitudes `π a_ij (i²+j²)^(−r) cos(cπt√(i²+j²))`.
    fn amplitudes(&self, t: f64) -> Vec<f64> {
        let k = self.k;
        let mut out = vec![0.0; k * k];
        for i in 1..=k {
            for j in 1..=k {
                let q = (i * i + j * j) as f64;
                let time = (self.c * PI * t * q.sqrt()).cos();
                out[(i - 1) * k + (j - 1)] = PI * self.coeffs[(i - 1) * k + (j - 1)] * q.powf(-self.r) * time;
            }
        }
        out
    }

    /// Sum of absolute mode amplitudes, an upper bound on `max |u(·, t)|`.
    pub fn amplitude_bound(&self) -> f64 {
        self.amplitudes(0.0).iter().map(|a| a.abs()).sum()
    }

    fn synthesize(&self, amp: &[f64]) -> Field {
        let (k, s) = (self.k, self.resolution);
        let nodes = grid_nodes(s);
        // basis[i][p] = sin(π (i+1) x_p)
        let basis: Vec<f64> = (1..=k)
            .flat_map(|i| nodes.iter().map(move |&x| (PI * i as f64 * x).sin()))
            .collect();
        let mut tmp = vec![0.0; k * s];
        gemm(k, k, s, amp, false, &basis, false, 0.0, &mut tmp);
        let mut u = vec![0.0; s * s];
        gemm(s, k, s, &basis, true, &tmp, false, 0.0, &mut u);
        Tensor::new(vec![1, s, s], u).expect("grid shape")
    }
}

/// Initial field `u₀` on the `s × s` grid, shape `[1, s, s]` (axes x, y).
pub fn wave_initial(p: &WaveParams) -> Result<Field> {
    wave_exact(p, 0.0)
}

/// Closed-form solution at time `t`.
pub fn wave_exact(p: &WaveParams, t: f64) -> Result<Field> {
    p.check()?;
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("wave time {t} must be ≥ 0")));
    }
    Ok(p.synthesize(&p.amplitudes(t)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Parameter ranges of a wave distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveDist {
    pub r: (f64, f64),
    /// Inclusive range of `K`.
    pub k: (usize, usize),
    pub resolution: usize,
    pub c: f64,
    pub t_final: f64,
}

impl WaveDist {
    pub fn train(scale: Scale) -> Self {
        let (k, resolution) = match scale {
            Scale::Desk => ((5, 7), 32),
            Scale::Paper => ((20, 28), 128),
        };
        Self {
            r: (0.75, 0.85),
            k,
            resolution,
            c: 0.1,
            t_final: 5.0,
        }
    }

    pub fn test(scale: Scale) -> Self {
        let (k, resolution) = match scale {
            Scale::Desk => ((4, 8), 32),
            Scale::Paper => ((16, 32), 128),
        };
        Self {
            r: (0.675, 0.925),
            k,
            resolution,
            c: 0.1,
            t_final: 5.0,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = self.r.0.is_finite()
            && self.r.1.is_finite()
            && self.r.0 <= self.r.1
            && self.k.0 >= 1
            && self.k.0 <= self.k.1
            && self.k.1 < self.resolution
            && self.c.is_finite()
            && self.t_final >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid wave ranges {self:?}")))
        }
    }

    /// Draws sample `index` of the stream `seed`.
    pub fn draw(&self, seed: u64, index: u64) -> WaveParams {
        let mut rng = labeled_stream(seed, "wave", index);
        let r = if self.r.0 < self.r.1 {
            rng.random_range(self.r.0..self.r.1)
        } else {
            self.r.0
        };
        let k = rng.random_range(self.k.0..=self.k.1);
        let coeffs = (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        WaveParams {
            k,
            r,
            coeffs,
            c: self.c,
            resolution: self.resolution,
        }
    }
}

/// `n` pairs `(u₀, u(·, T))` stacked as joint samples `[n, 2, s, s]`.
pub fn gen_wave_dataset(dist: &WaveDist, n: usize, seed: u64) -> Result<Dataset> {
    dist.check()?;
    let rows: Vec<(Field, serde_json::Value)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let p = dist.draw(seed, i);
            let x = wave_initial(&p)?;
            let y = wave_exact(&p, dist.t_final)?;
            Ok((Tensor::concat_channels(&x, &y)?, json!({"K": p.k, "r": p.r})))
        })
        .collect::<Result<_>>()?;
    let (fields, meta): (Vec<Field>, Vec<_>) = rows.into_iter().unzip();
    if fields.is_empty() {
        return Err(Error::invalid("wave dataset needs n ≥ 1"));
    }
    Dataset::new("wave", Tensor::stack(&fields)?, 1, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode() -> WaveParams {
        WaveParams {
            k: 1,
            r: 0.0,
            coeffs: vec![1.0],
            c: 0.1,
            resolution: 8,
        }
    }

    #[test]
    fn single_mode_closed_form() {
        let p = single_mode();
        let u = wave_initial(&p).unwrap();
        let nodes = grid_nodes(8);
        for (a, &x) in nodes.iter().enumerate() {
            for (b, &y) in nodes.iter().enumerate() {
                let want = PI * (PI * x).sin() * (PI * y).sin();
                assert!((u.data()[a * 8 + b] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_field() {
        let mut p = single_mode();
        p.k = 3;
        p.coeffs = vec![0.0; 9];
        assert_eq!(wave_initial(&p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn time_zero_and_zero_speed_are_identity() {
        let p = WaveDist::train(Scale::Desk).draw(3, 0);
        let u0 = wave_initial(&p).unwrap();
        assert_eq!(wave_exact(&p, 0.0).unwrap(), u0);
        let still = WaveParams { c: 0.0, ..p };
        assert_eq!(wave_exact(&still, 5.0).unwrap(), u0);
    }

    #[test]
    fn mode_cosine_factor() {
        // One mode, t chosen so the cosine is −1.
        let p = single_mode();
        let t = 1.0 / (p.c * 2f64.sqrt());
        let u0 = wave_initial(&p).unwrap();
        let ut = wave_exact(&p, t).unwrap();
        for (a, b) in u0.data().iter().zip(ut.data()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn ranges_are_validated() {
        let mut d = WaveDist::train(Scale::Desk);
        d.k = (4, 2);
        assert!(gen_wave_dataset(&d, 2, 0).is_err());
        let mut d = WaveDist::train(Scale::Desk);
        d.r = (0.9, 0.1);
        assert!(gen_wave_dataset(&d, 2, 0).is_err());
    }
}
