use serde::{Deserialize, Serialize};

use super::{gemm, ParamSet, ParamVars, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Convolution padding mode (stride is always 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
enum Act {
    Silu,
    Tanh,
    Relu,
}

enum Val<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Val<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    ScaleRows(Var, Vec<T>),
    Linear { x: Var, w: Var, b: Option<Var> },
    AddBroadcast { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Act(Var, Act),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<'p, T> {
    value: Val<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations. Parameters may be borrowed for the lifetime `'p`.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(t: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N, C, H, W], got {t:?}"))),
    }
}

/// `[N, C, rest...]` viewed as (N, C, rest).
fn nc_rest(t: &[usize]) -> (usize, usize, usize) {
    let n = t.first().copied().unwrap_or(1);
    let c = t.get(1).copied().unwrap_or(1);
    let rest = t.get(2..).map(|r| r.iter().product()).unwrap_or(1);
    (n, c, rest)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Val<'p, T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericalOverflow { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Val::Owned(value), op, rg))
    }

    /// Differentiable leaf borrowing its value.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Val::Borrowed(t), Op::Leaf, true)
    }

    /// Differentiable leaf owning its value.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Val::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Val::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Val::Borrowed(t), Op::Leaf, false)
    }

    /// Registers every tensor of `params` as a borrowed differentiable leaf.
    pub fn params(&mut self, params: &'p ParamSet<T>) -> ParamVars {
        params.iter().map(|(k, t)| (k.clone(), self.param(t))).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Takes the value of `v` out of the graph (cloning borrowed leaves).
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        match std::mem::replace(&mut self.nodes[v.0].value, Val::Owned(Tensor::scalar(T::zero()))) {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t.clone(),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_op("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push_op("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_op("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push_op("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push_op("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a non-differentiable tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        self.push_op("mul_const", v, Op::MulConst(a, c), &[a])
    }

    /// Multiplies every leading-axis slice `i` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Vec<T>) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != s.len() || t.shape().is_empty() {
            return Err(Error::shape("scale_rows", format!("{:?} with {} scales", t.shape(), s.len())));
        }
        let w = t.row_len();
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(w).enumerate() {
            for v in chunk {
                *v *= s[i];
            }
        }
        self.push_op("scale_rows", out, Op::ScaleRows(a, s), &[a])
    }

    /// Dense affine map: `x [m, k] · w [k, n] + b [n]`. `x` may carry extra
    /// trailing axes, which are flattened into `k`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (m, k) = (xt.rows(), xt.row_len());
        if wt.shape().len() != 2 || wt.shape()[0] != k {
            return Err(Error::shape("linear", format!("x {:?}, w {:?}", xt.shape(), wt.shape())));
        }
        let n = wt.shape()[1];
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [n] {
                return Err(Error::shape("linear", format!("bias {:?} for width {n}", bt.shape())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bt.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(m, k, n, xt.data(), false, wt.data(), false, beta, &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op("linear", v, Op::Linear { x, w, b }, &parents)
    }

    /// Adds `b` of shape `[C]` or `[N, C]` to `x` of shape `[N, C, ...]`,
    /// broadcasting over trailing axes (and over `N` when `b` is `[C]`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(b);
        let (n, c, rest) = nc_rest(xt.shape());
        let per_row = match bt.shape() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            _ => {
                return Err(Error::shape(
                    "add_broadcast",
                    format!("x {:?}, b {:?}", xt.shape(), bt.shape()),
                ))
            }
        };
        let mut out = xt.clone();
        let bd = bt.data();
        for (idx, chunk) in out.data_mut().chunks_mut(rest).enumerate() {
            let (i, ch) = (idx / c, idx % c);
            let add = if per_row { bd[i * c + ch] } else { bd[ch] };
            for v in chunk {
                *v += add;
            }
        }
        self.push_op("add_broadcast", out, Op::AddBroadcast { x, b }, &[x, b])
    }

    /// 2-D convolution, stride 1. `x [N, Cin, H, W]`, `w [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let (n, cin, h, wd) = dims4(self.shape(x), "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(self.shape(w), "conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        let pad = match padding {
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(Error::shape("conv2d", "same padding needs an odd square kernel"));
                }
                kh / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let geo = ConvGeo {
            cin,
            h,
            w: wd,
            kh,
            kw,
            pad,
            ho,
            wo,
        };
        let xt = self.value(x).data();
        let wt = self.value(w).data();
        let kk = cin * kh * kw;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * cout * plane];
        let mut col = vec![T::zero(); kk * plane];
        for s in 0..n {
            geo.im2col(&xt[s * cin * h * wd..(s + 1) * cin * h * wd], &mut col);
            let o = &mut out[s * cout * plane..(s + 1) * cout * plane];
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (c, row) in o.chunks_mut(plane).enumerate() {
                    row.fill(bd[c]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(cout, kk, plane, wt, false, &col, false, beta, o);
        }
        let v = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op("conv2d", v, Op::Conv2d { x, w, b, pad }, &parents)
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let xt = self.value(x).data();
        let (h2, w2) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xt[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * w2 + j] = (a + b) * q;
                }
            }
        }
        let v = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push_op("avg_pool2", v, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "upsample2")?;
        let xt = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xt[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push_op("upsample2", v, Op::Upsample2(x), &[x])
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", format!("need rank >= 2, got {s0:?}")));
        }
        let (n, _, rest) = nc_rest(&s0);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * rest);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let w = t.row_len();
                out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total_c;
        let v = Tensor::new(shape, out)?;
        self.push_op("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    fn act(&mut self, x: Var, a: Act, name: &'static str) -> Result<Var> {
        let v = self.value(x).map(|v| match a {
            Act::Silu => v * sigmoid(v),
            Act::Tanh => v.tanh(),
            Act::Relu => v.max(T::zero()),
        });
        self.push_op(name, v, Op::Act(x, a), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.act(x, Act::Silu, "silu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.act(x, Act::Tanh, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.act(x, Act::Relu, "relu")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v.abs());
        self.push_op("abs", v, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v * v);
        self.push_op("square", v, Op::Square(x), &[x])
    }

    fn last_axis(&self, x: Var) -> usize {
        self.shape(x).last().copied().unwrap_or(1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.last_axis(x);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push_op("softmax", out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.last_axis(x);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push_op("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let w = self.last_axis(x);
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{w}]")));
        }
        let eps = T::lit(1e-5);
        let xt = self.value(x);
        let rows = xt.len() / w.max(1);
        let mut xhat = vec![T::zero(); xt.len()];
        let mut rstd = vec![T::zero(); rows];
        let nw = T::lit(w as f64);
        for (r, (src, dst)) in xt.data().chunks(w).zip(xhat.chunks_mut(w)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / nw;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nw;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % w] + b[i % w])
            .collect();
        let v = Tensor::new(xt.shape().to_vec(), out)?;
        self.push_op(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push_op("mean", v, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push_op("reshape", v, Op::Reshape(x), &[x])
    }

    /// Reverse sweep from `out`, seeded with ones.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(Tensor::ones(self.shape(out)));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots)?;
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(slots, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(slots, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(slots, *a, g.map(|v| v * *s)),
            Op::AddScalar(a) => self.accumulate(slots, *a, g.clone()),
            Op::MulConst(a, c) => self.accumulate(slots, *a, g.zip_map(c, |x, y| x * y)?),
            Op::ScaleRows(a, s) => {
                let w = g.row_len();
                let mut ga = g.clone();
                for (r, chunk) in ga.data_mut().chunks_mut(w).enumerate() {
                    for v in chunk {
                        *v *= s[r];
                    }
                }
                self.accumulate(slots, *a, ga);
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (m, k) = (xt.rows(), xt.row_len());
                let n = wt.shape()[1];
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, wt.data(), true, T::zero(), &mut gx);
                    self.accumulate(slots, *x, Tensor::new(xt.shape().to_vec(), gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(k, m, n, xt.data(), true, g.data(), false, T::zero(), &mut gw);
                    self.accumulate(slots, *w, Tensor::new(vec![k, n], gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += *v;
                            }
                        }
                        self.accumulate(slots, *b, Tensor::new(vec![n], gb)?);
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                self.accumulate(slots, *x, g.clone());
                if self.wants(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let (_, c, rest) = nc_rest(g.shape());
                    let per_row = bshape.len() == 2;
                    let mut gb = vec![T::zero(); bshape.iter().product()];
                    for (idx, chunk) in g.data().chunks(rest).enumerate() {
                        let slot = if per_row { idx } else { idx % c };
                        gb[slot] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(slots, *b, Tensor::new(bshape, gb)?);
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (n, cin, h, wd) = dims4(self.shape(*x), "conv2d")?;
                let (cout, _, kh, kw) = dims4(self.shape(*w), "conv2d")?;
                let (ho, wo) = (y.shape()[2], y.shape()[3]);
                let geo = ConvGeo {
                    cin,
                    h,
                    w: wd,
                    kh,
                    kw,
                    pad: *pad,
                    ho,
                    wo,
                };
                let kk = cin * kh * kw;
                let plane = ho * wo;
                let xt = self.value(*x).data();
                let wt = self.value(*w).data();
                let mut col = vec![T::zero(); kk * plane];
                let mut gw = vec![T::zero(); cout * kk];
                let mut gx = if self.wants(*x) {
                    vec![T::zero(); n * cin * h * wd]
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    let gs = &g.data()[s * cout * plane..(s + 1) * cout * plane];
                    if self.wants(*w) {
                        geo.im2col(&xt[s * cin * h * wd..(s + 1) * cin * h * wd], &mut col);
                        gemm(cout, plane, kk, gs, false, &col, true, T::one(), &mut gw);
                    }
                    if self.wants(*x) {
                        gemm(kk, cout, plane, wt, true, gs, false, T::zero(), &mut col);
                        geo.col2im(&col, &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd]);
                    }
                }
                if self.wants(*x) {
                    self.accumulate(slots, *x, Tensor::new(vec![n, cin, h, wd], gx)?);
                }
                if self.wants(*w) {
                    self.accumulate(slots, *w, Tensor::new(vec![cout, cin, kh, kw], gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); cout];
                        for (idx, chunk) in g.data().chunks(plane).enumerate() {
                            gb[idx % cout] += chunk.iter().copied().sum::<T>();
                        }
                        self.accumulate(slots, *b, Tensor::new(vec![cout], gb)?);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = dims4(&xs, "avg_pool2")?;
                let (h2, w2) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = src[(i / 2) * w2 + j / 2] * q;
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::new(xs, gx)?);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let (n, c, h, w) = dims4(&xs, "upsample2")?;
                let w2 = 2 * w;
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..w2 {
                            dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::new(xs, gx)?);
            }
            Op::Concat(parts) => {
                let n = g.rows();
                let total = g.row_len();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let w: usize = ps[1..].iter().product();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(slots, p, Tensor::new(ps, gp)?);
                    }
                    offset += w;
                }
            }
            Op::Act(x, a) => {
                let xt = self.value(*x);
                let gx: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xt.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| {
                        gv * match a {
                            Act::Silu => {
                                let s = sigmoid(xv);
                                s * (T::one() + xv * (T::one() - s))
                            }
                            Act::Tanh => T::one() - yv * yv,
                            Act::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    })
                    .collect();
                self.accumulate(slots, *x, Tensor::new(xt.shape().to_vec(), gx)?);
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(slots, *x, gx);
            }
            Op::Square(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * (xv + xv))?;
                self.accumulate(slots, *x, gx);
            }
            Op::Softmax(x) => {
                let w = self.last_axis(*x);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(slots, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let w = self.last_axis(*x);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let total: T = gr.iter().copied().sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = *gv - yv.exp() * total;
                    }
                }
                self.accumulate(slots, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let w = self.last_axis(*x);
                let gam = self.value(*gamma).data();
                let nw = T::lit(w as f64);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); w];
                    let mut gb = vec![T::zero(); w];
                    for (gr, xr) in g.data().chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * xr[j];
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(slots, *gamma, Tensor::new(vec![w], gg)?);
                    self.accumulate(slots, *beta, Tensor::new(vec![w], gb)?);
                }
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, ((gr, xr), out)) in g
                        .data()
                        .chunks(w)
                        .zip(xhat.chunks(w))
                        .zip(gx.chunks_mut(w))
                        .enumerate()
                    {
                        let dxh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            out[j] = rstd[r] / nw * (nw * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                    self.accumulate(slots, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(slots, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                let s = g.data()[0] / T::lit(xt.len() as f64);
                self.accumulate(slots, *x, Tensor::full(xt.shape(), s));
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(slots, *x, gx);
            }
        }
        Ok(())
    }
}

struct ConvGeo {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    /// Unfolds one sample `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[r * plane..(r + 1) * plane];
                    for oi in 0..self.ho {
                        let ii = oi + ki;
                        let in_row = ii >= self.pad && ii - self.pad < self.h;
                        for oj in 0..self.wo {
                            let jj = oj + kj;
                            dst[oi * self.wo + oj] = if in_row && jj >= self.pad && jj - self.pad < self.w {
                                x[(c * self.h + ii - self.pad) * self.w + jj - self.pad]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeo::im2col`], accumulating into `x`.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let plane = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[r * plane..(r + 1) * plane];
                    for oi in 0..self.ho {
                        let ii = oi + ki;
                        if ii < self.pad || ii - self.pad >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = oj + kj;
                            if jj >= self.pad && jj - self.pad < self.w {
                                x[(c * self.h + ii - self.pad) * self.w + jj - self.pad] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Evaluates `f` over `at` and returns its scalar value with `∂f/∂p` for every parameter.
pub fn grad<'p, T, F>(at: &'p ParamSet<T>, f: F) -> Result<(T, ParamSet<T>)>
where
    T: Real,
    F: FnOnce(&mut Graph<'p, T>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = g.params(at);
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("grad", format!("objective must be scalar, got {:?}", g.shape(out))));
    }
    let value = g.value(out).data()[0];
    let mut grads = g.backward(out)?;
    let mut result = ParamSet::new();
    for (name, v) in vars {
        let gt = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(at.get(&name).map(Tensor::shape).unwrap_or(&[])));
        result.insert(name, gt);
    }
    Ok((value, result))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(v.to_vec()));
        p
    }

    #[test]
    fn quadratic_form_gradient() {
        let p = vec_param(&[1.0, 2.0]);
        let (val, g) = grad(&p, |g, v| {
            let sq = g.square(v["w"])?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(val, 5.0);
        assert_eq!(g.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let p = vec_param(&[0.3, -7.0, 11.0]);
        let (_, g) = grad(&p, |g, v| g.sum(v["w"])).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn overflow_is_reported_with_op_name() {
        let p = vec_param(&[1e200]);
        let err = grad(&p, |g, v| {
            let sq = g.square(v["w"])?;
            g.sum(sq)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NumericalOverflow { op: "square" }), "{err}");
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let p = vec_param(&[1.0, 2.0]);
        assert!(grad(&p, |_, v| Ok(v["w"])).is_err());
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(g.linear(x, w, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn same_conv_keeps_spatial_size() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 3, 5, 5]));
        let w = g.constant(Tensor::ones(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 5]);
        // interior pixel sees the full 3x3x3 window
        assert_eq!(g.value(y).data()[2 * 5 + 2], 27.0);
        // corner sees 2x2x3
        assert_eq!(g.value(y).data()[0], 12.0);
        let yv = g.conv2d(x, w, None, Padding::Valid).unwrap();
        assert_eq!(g.shape(yv), &[2, 4, 3, 3]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for r in g.value(y).data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
