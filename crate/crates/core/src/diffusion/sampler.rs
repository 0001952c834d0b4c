use rand_distr::{Distribution, StandardNormal};

use super::{score_batch, Denoise};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::ode::{integrate, OdeMethod};
use crate::rng::labeled_stream;

const MIN_STEPS: usize = 8;

fn check_steps(steps: usize) -> Result<()> {
    if steps < MIN_STEPS {
        return Err(Error::invalid(format!("steps ≥ {MIN_STEPS} required, got {steps}")));
    }
    Ok(())
}

/// `n` prior draws `N(0, σ_max² I)`, one stream per sample.
fn prior_draws<D: Denoise + ?Sized>(d: &D, n: usize, seed: u64, label: &str) -> Tensor<f64> {
    let shape = d.sample_shape();
    let per: usize = shape.iter().product();
    let sigma = d.schedule().sigma_max;
    let mut data = Vec::with_capacity(n * per);
    for i in 0..n {
        let mut rng = labeled_stream(seed, label, i as u64);
        data.extend((0..per).map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            sigma * e
        }));
    }
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(full, data).expect("prior shape")
}

fn batch_shape<D: Denoise + ?Sized>(d: &D, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend(d.sample_shape());
    s
}

/// Probability-flow ODE from `t = 1` to `t = 0` with fixed-step RK38.
pub fn sample_ode<D: Denoise + ?Sized>(d: &D, n: usize, steps: usize, seed: u64) -> Result<Tensor<f64>> {
    check_steps(steps)?;
    let sched = d.schedule();
    let z0 = prior_draws(d, n, seed, "sample-ode");
    let shape = batch_shape(d, n);
    let drift = |t: f64, y: &[f64], _stage: usize| -> Result<Vec<f64>> {
        let z = Tensor::new(shape.clone(), y.to_vec())?;
        let s = score_batch(d, &z, &vec![sched.sigma_at(t); n])?;
        let c = -0.5 * sched.g2(t);
        Ok(s.into_data().into_iter().map(|v| c * v).collect())
    };
    let check = |t: f64, y: &[f64], _: Option<&[f64]>| {
        if y.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Diverged { t })
        }
    };
    let y = integrate(OdeMethod::Rk38, z0.into_data(), 1.0, 0.0, steps, drift, check)?;
    Tensor::new(shape, y)
}

/// Euler–Maruyama on the reverse-time VE SDE `dz = −g² s dt + g dw̄`.
pub fn sample_sde<D: Denoise + ?Sized>(d: &D, n: usize, steps: usize, seed: u64) -> Result<Tensor<f64>> {
    check_steps(steps)?;
    let sched = d.schedule();
    let mut z = prior_draws(d, n, seed, "sample-sde");
    let w = z.row_len();
    let mut rngs: Vec<_> = (0..n).map(|i| labeled_stream(seed, "sample-sde-noise", i as u64)).collect();
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * h;
        let g2 = sched.g2(t);
        let s = score_batch(d, &z, &vec![sched.sigma_at(t); n])?;
        let amp = (g2 * h).sqrt();
        for (i, (row, srow)) in z.data_mut().chunks_mut(w).zip(s.data().chunks(w)).enumerate() {
            for (v, &si) in row.iter_mut().zip(srow) {
                let e: f64 = StandardNormal.sample(&mut rngs[i]);
                *v += g2 * si * h + amp * e;
            }
        }
        if !z.is_finite() {
            return Err(Error::Diverged { t });
        }
    }
    Ok(z)
}
