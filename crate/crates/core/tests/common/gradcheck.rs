//! Central finite-difference gradient checks for every graph primitive.

use oodcert::diffcore::{grad, Graph, Padding, ParamSet, ParamVars, Tensor, Var};
use oodcert::rng::labeled_stream;
use oodcert::Result;
use rand_distr::{Distribution, StandardNormal};

pub type Build = for<'p> fn(&mut Graph<'p, f64>, &ParamVars) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub params: ParamSet<f64>,
    pub build: Build,
}

fn randn(shape: &[usize], label: &str, idx: u64) -> Tensor<f64> {
    let mut rng = labeled_stream(17, label, idx);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Entries pushed at least 0.2 away from 0 (for kinked activations).
fn away_from_zero(shape: &[usize], idx: u64) -> Tensor<f64> {
    randn(shape, "kink", idx).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn set(items: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
    items.iter().map(|(k, t)| (k.to_string(), t.clone())).collect()
}

/// Random-weighted sum so every output element carries its own cotangent.
fn weighted<'p>(g: &mut Graph<'p, f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = randn(&shape, "cotangent", 0);
    let w = g.mul_const(out, r)?;
    g.sum(w)
}

pub fn cases() -> Vec<Case> {
    let x34 = randn(&[3, 4], "x", 0);
    vec![
        Case {
            name: "linear",
            params: set(&[("x", x34.clone()), ("w", randn(&[4, 5], "w", 0)), ("b", randn(&[5], "b", 0))]),
            build: |g, p| {
                let o = g.linear(p["x"], p["w"], Some(p["b"]))?;
                weighted(g, o)
            },
        },
        Case {
            name: "linear (flattened trailing axes)",
            params: set(&[("x", randn(&[2, 2, 3], "x", 1)), ("w", randn(&[6, 4], "w", 1))]),
            build: |g, p| {
                let o = g.linear(p["x"], p["w"], None)?;
                weighted(g, o)
            },
        },
        Case {
            name: "conv2d same",
            params: set(&[
                ("x", randn(&[2, 2, 5, 5], "x", 2)),
                ("w", randn(&[3, 2, 3, 3], "w", 2)),
                ("b", randn(&[3], "b", 2)),
            ]),
            build: |g, p| {
                let o = g.conv2d(p["x"], p["w"], Some(p["b"]), Padding::Same)?;
                weighted(g, o)
            },
        },
        Case {
            name: "conv2d valid",
            params: set(&[("x", randn(&[1, 2, 6, 5], "x", 3)), ("w", randn(&[2, 2, 3, 2], "w", 3))]),
            build: |g, p| {
                let o = g.conv2d(p["x"], p["w"], None, Padding::Valid)?;
                weighted(g, o)
            },
        },
        Case {
            name: "avg_pool2",
            params: set(&[("x", randn(&[2, 3, 4, 6], "x", 4))]),
            build: |g, p| {
                let o = g.avg_pool2(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "upsample2",
            params: set(&[("x", randn(&[1, 2, 3, 3], "x", 5))]),
            build: |g, p| {
                let o = g.upsample2(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "concat",
            params: set(&[("a", randn(&[2, 1, 3, 3], "x", 6)), ("b", randn(&[2, 2, 3, 3], "x", 7))]),
            build: |g, p| {
                let o = g.concat(&[p["a"], p["b"]])?;
                weighted(g, o)
            },
        },
        Case {
            name: "add_broadcast [C]",
            params: set(&[("x", randn(&[2, 3, 4], "x", 8)), ("b", randn(&[3], "b", 8))]),
            build: |g, p| {
                let o = g.add_broadcast(p["x"], p["b"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "add_broadcast [N, C]",
            params: set(&[("x", randn(&[2, 3, 2, 2], "x", 9)), ("b", randn(&[2, 3], "b", 9))]),
            build: |g, p| {
                let o = g.add_broadcast(p["x"], p["b"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "silu",
            params: set(&[("x", x34.clone())]),
            build: |g, p| {
                let o = g.silu(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "tanh",
            params: set(&[("x", x34.clone())]),
            build: |g, p| {
                let o = g.tanh(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "relu",
            params: set(&[("x", away_from_zero(&[3, 4], 0))]),
            build: |g, p| {
                let o = g.relu(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "abs",
            params: set(&[("x", away_from_zero(&[3, 4], 1))]),
            build: |g, p| {
                let o = g.abs(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "square",
            params: set(&[("x", x34.clone())]),
            build: |g, p| {
                let o = g.square(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "softmax",
            params: set(&[("x", randn(&[3, 5], "x", 10))]),
            build: |g, p| {
                let o = g.softmax(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "log_softmax",
            params: set(&[("x", randn(&[3, 5], "x", 11))]),
            build: |g, p| {
                let o = g.log_softmax(p["x"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "layer_norm",
            params: set(&[
                ("x", randn(&[4, 6], "x", 12)),
                ("gamma", randn(&[6], "g", 12)),
                ("beta", randn(&[6], "b", 12)),
            ]),
            build: |g, p| {
                let o = g.layer_norm(p["x"], p["gamma"], p["beta"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "sum",
            params: set(&[("x", x34.clone())]),
            build: |g, p| {
                let sq = g.square(p["x"])?;
                let o = g.sum(sq)?;
                weighted(g, o)
            },
        },
        Case {
            name: "mean",
            params: set(&[("x", x34.clone())]),
            build: |g, p| {
                let sq = g.square(p["x"])?;
                let o = g.mean(sq)?;
                weighted(g, o)
            },
        },
        Case {
            name: "reshape",
            params: set(&[("x", x34.clone())]),
            build: |g, p| {
                let o = g.reshape(p["x"], &[2, 6])?;
                let o = g.tanh(o)?;
                weighted(g, o)
            },
        },
        Case {
            name: "add / sub / mul",
            params: set(&[("a", x34.clone()), ("b", randn(&[3, 4], "x", 13))]),
            build: |g, p| {
                let s = g.add(p["a"], p["b"])?;
                let d = g.sub(p["a"], p["b"])?;
                let o = g.mul(s, d)?;
                let o = g.mul(o, p["b"])?;
                weighted(g, o)
            },
        },
        Case {
            name: "scale / add_scalar / scale_rows / mul_const",
            params: set(&[("x", x34)]),
            build: |g, p| {
                let o = g.scale(p["x"], -1.7)?;
                let o = g.add_scalar(o, 0.3)?;
                let o = g.scale_rows(o, vec![0.5, -2.0, 3.0])?;
                let c = randn(&[3, 4], "c", 0);
                let o = g.mul_const(o, c)?;
                let o = g.square(o)?;
                weighted(g, o)
            },
        },
    ]
}

fn value(params: &ParamSet<f64>, build: Build) -> f64 {
    let mut g = Graph::new();
    let vars = g.params(params);
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).data()[0]
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over all
/// parameter entries, with central differences of step `1e-5`.
pub fn max_rel_error(case: &Case) -> f64 {
    let (_, analytic) = grad(&case.params, |g, p| (case.build)(g, p)).expect("backward");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, t) in case.params.iter() {
        for i in 0..t.len() {
            let mut plus = case.params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = case.params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (value(&plus, case.build) - value(&minus, case.build)) / (2.0 * h);
            let a = analytic.get(name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
