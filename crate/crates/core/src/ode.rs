//! Fixed-step explicit Runge–Kutta integration.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Butcher tableau of an explicit method.
struct Tableau {
    c: &'static [f64],
    a: &'static [&'static [f64]],
    b: &'static [f64],
}

/// Kutta's 3/8-rule fourth-order method.
const RK38: Tableau = Tableau {
    c: &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
    a: &[&[], &[1.0 / 3.0], &[-1.0 / 3.0, 1.0], &[1.0, -1.0, 1.0]],
    b: &[1.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0],
};

/// Dormand–Prince 5(4), advancing with the fifth-order weights at a fixed step.
const DOPRI5: Tableau = Tableau {
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ],
    b: &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0],
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeMethod {
    Rk38,
    Rk45Fixed,
}

impl OdeMethod {
    fn tableau(self) -> &'static Tableau {
        match self {
            OdeMethod::Rk38 => &RK38,
            OdeMethod::Rk45Fixed => &DOPRI5,
        }
    }

    pub fn stages(self) -> usize {
        self.tableau().b.len()
    }
}

/// Integrates `dy/dt = f(t, y, stage)` from `t0` to `t1` in `steps` equal steps.
///
/// `f` receives the stage index so callers can tell the first stage of a step
/// (evaluated exactly at a grid node) from the intermediate ones. `observe` is
/// called at every grid node `t0 + k·h` (including both ends) with the state
/// there; at interior nodes and `t0` it also gets the first-stage derivative.
pub fn integrate<F, O>(method: OdeMethod, y0: Vec<f64>, t0: f64, t1: f64, steps: usize, mut f: F, mut observe: O) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], usize) -> Result<Vec<f64>>,
    O: FnMut(f64, &[f64], Option<&[f64]>) -> Result<()>,
{
    let tab = method.tableau();
    let h = (t1 - t0) / steps as f64;
    let n = y0.len();
    let mut y = y0;
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(tab.b.len());
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        k.clear();
        for (s, row) in tab.a.iter().enumerate() {
            tmp.copy_from_slice(&y);
            for (j, &aij) in row.iter().enumerate() {
                if aij != 0.0 {
                    for (d, kv) in tmp.iter_mut().zip(&k[j]) {
                        *d += h * aij * kv;
                    }
                }
            }
            let ks = f(t + tab.c[s] * h, &tmp, s)?;
            if s == 0 {
                observe(t, &y, Some(&ks))?;
            }
            k.push(ks);
        }
        for (s, &bs) in tab.b.iter().enumerate() {
            if bs != 0.0 {
                for (d, kv) in y.iter_mut().zip(&k[s]) {
                    *d += h * bs * kv;
                }
            }
        }
    }
    observe(t1, &y, None)?;
    Ok(y)
}
