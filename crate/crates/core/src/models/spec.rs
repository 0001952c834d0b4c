use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Padding, ParamSet, ParamVars, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::labeled_stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
    Relu,
}

/// Scalar fed to the conditioning embedding, one value per batch row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    #[default]
    None,
    NoiseLevel,
    LeadTime,
}

/// Architecture description. Shapes are per sample, channel axis first.
///
/// `widths` are hidden layer widths for `mlp` and per-level channel counts
/// for `conv` (a U-shaped encoder-decoder with one skip per level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    #[serde(default)]
    pub conditioning: Conditioning,
    /// Number of Fourier features of the conditioning scalar.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub zero_init_output: bool,
}

fn default_embed_dim() -> usize {
    16
}

impl ModelSpec {
    pub fn mlp(input: usize, widths: &[usize], output: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            widths: widths.to_vec(),
            activation: Activation::Silu,
            input_shape: vec![input],
            output_shape: vec![output],
            conditioning: Conditioning::None,
            embed_dim: default_embed_dim(),
            zero_init_output: false,
        }
    }

    pub fn conv(input: &[usize], widths: &[usize], output: &[usize]) -> Self {
        Self {
            arch: Arch::Conv,
            input_shape: input.to_vec(),
            output_shape: output.to_vec(),
            ..Self::mlp(0, widths, 0)
        }
    }

    pub fn with_conditioning(mut self, c: Conditioning) -> Self {
        self.conditioning = c;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn zero_output(mut self) -> Self {
        self.zero_init_output = true;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    fn conditioned(&self) -> bool {
        self.conditioning != Conditioning::None
    }

    fn embed_hidden(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model spec: {m}")));
        if self.input_len() == 0 || self.output_len() == 0 {
            return bad("empty input or output shape".into());
        }
        if self.widths.contains(&0) {
            return bad("zero width".into());
        }
        if self.conditioned() && (self.embed_dim == 0 || self.embed_dim % 2 != 0) {
            return bad("embed_dim must be even and positive".into());
        }
        if self.arch == Arch::Conv {
            let (i, o) = (&self.input_shape, &self.output_shape);
            if i.len() != 3 || o.len() != 3 || i[1..] != o[1..] {
                return bad(format!("conv needs [C, H, W] shapes with equal H, W; got {i:?} → {o:?}"));
            }
            if self.widths.is_empty() {
                return bad("conv needs at least one level".into());
            }
            let f = 1usize << (self.widths.len() - 1);
            if i[1] % f != 0 || i[2] % f != 0 {
                return bad(format!("{}×{} grid not divisible by {f}", i[1], i[2]));
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter, zero fan-in meaning a bias.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut dense = |name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o], i));
            out.push((format!("{name}.b"), vec![o], 0));
        };
        let eh = self.embed_hidden();
        if self.conditioned() {
            dense("emb.in".into(), self.embed_dim + 1, eh);
        }
        match self.arch {
            Arch::Mlp => {
                let mut prev = self.input_len();
                for (l, &w) in self.widths.iter().enumerate() {
                    dense(format!("hidden.{l}"), prev, w);
                    if self.conditioned() {
                        dense(format!("hidden.{l}.emb"), eh, w);
                    }
                    prev = w;
                }
                dense("out".into(), prev, self.output_len());
            }
            Arch::Conv => {
                let ws = &self.widths;
                let mut conv = |name: String, cin: usize, cout: usize| {
                    out.push((format!("{name}.w"), vec![cout, cin, 3, 3], cin * 9));
                    out.push((format!("{name}.b"), vec![cout], 0));
                };
                conv("stem".into(), self.input_shape[0], ws[0]);
                for l in 0..ws.len() {
                    conv(format!("enc.{l}"), ws[l], ws[l]);
                    if l + 1 < ws.len() {
                        conv(format!("down.{l}"), ws[l], ws[l + 1]);
                        conv(format!("up.{l}"), ws[l + 1], ws[l]);
                        conv(format!("dec.{l}"), 2 * ws[l], ws[l]);
                    }
                }
                conv("out".into(), ws[0], self.output_shape[0]);
                if self.conditioned() {
                    for l in 0..ws.len() {
                        out.push((format!("enc.{l}.emb.w"), vec![eh, ws[l]], eh));
                        out.push((format!("enc.{l}.emb.b"), vec![ws[l]], 0));
                        if l + 1 < ws.len() {
                            out.push((format!("dec.{l}.emb.w"), vec![eh, ws[l]], eh));
                            out.push((format!("dec.{l}.emb.b"), vec![ws[l]], 0));
                        }
                    }
                }
            }
        }
        out
    }

    /// Random initial parameters: weights `N(0, gain²/fan_in)`, zero biases.
    pub fn init(&self, seed: u64) -> Result<ParamSet<f64>> {
        self.validate()?;
        let gain = match self.activation {
            Activation::Tanh => 1.0,
            Activation::Silu | Activation::Relu => 2f64.sqrt(),
        };
        let mut params = ParamSet::new();
        for (idx, (name, shape, fan_in)) in self.layout().into_iter().enumerate() {
            let zero = fan_in == 0 || (self.zero_init_output && name.starts_with("out."));
            let t = if zero {
                Tensor::zeros(&shape)
            } else {
                let mut rng = labeled_stream(seed, "init", idx as u64);
                let sd = gain / (fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    sd * e
                })
            };
            params.insert(name, t);
        }
        Ok(params)
    }

    /// Checks that `params` matches this spec's layout.
    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let want = self.layout();
        if want.len() != params.len() {
            return Err(Error::shape("model params", format!("{} tensors, spec needs {}", params.len(), want.len())));
        }
        for (name, shape, _) in want {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::shape("model params", format!("{name}: {:?} vs {shape:?}", t.shape()))),
                None => return Err(Error::shape("model params", format!("missing {name}"))),
            }
        }
        Ok(())
    }

    fn act<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self.activation {
            Activation::Silu => g.silu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }

    /// Fourier features `[c, sin(ω_k c), cos(ω_k c)]`, `ω_k = π 2^k / 2`.
    fn cond_features<T: Real>(&self, cond: &[f64]) -> Tensor<T> {
        let half = self.embed_dim / 2;
        let width = self.embed_dim + 1;
        let mut data = Vec::with_capacity(cond.len() * width);
        for &c in cond {
            data.push(T::lit(c));
            for k in 0..half {
                let w = PI * (1u64 << k) as f64 / 2.0;
                data.push(T::lit((w * c).sin()));
                data.push(T::lit((w * c).cos()));
            }
        }
        Tensor::new(vec![cond.len(), width], data).expect("feature shape")
    }

    fn embedding<T: Real>(&self, g: &mut Graph<'_, T>, p: &ParamVars, cond: Option<&[f64]>, n: usize) -> Result<Option<Var>> {
        match (self.conditioned(), cond) {
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::invalid("model takes no conditioning input")),
            (true, None) => Err(Error::invalid("model requires a conditioning value")),
            (true, Some(c)) if c.len() != n => Err(Error::shape("conditioning", format!("{} values for batch {n}", c.len()))),
            (true, Some(c)) => {
                let f = g.constant(self.cond_features(c));
                let h = g.linear(f, p["emb.in.w"], Some(p["emb.in.b"]))?;
                Ok(Some(g.silu(h)?))
            }
        }
    }

    fn param<'a>(p: &'a ParamVars, name: &str) -> Result<Var> {
        p.get(name)
            .copied()
            .ok_or_else(|| Error::shape("model params", format!("missing {name}")))
    }

    /// Forward pass over a batch `x [N, input_shape...]`; returns `[N, output_shape...]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, p: &ParamVars, x: Var, cond: Option<&[f64]>) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::shape("forward", format!("input {xs:?}, spec {:?}", self.input_shape)));
        }
        let n = xs[0];
        let emb = self.embedding(g, p, cond, n)?;
        let add_emb = |g: &mut Graph<'_, T>, h: Var, name: &str| -> Result<Var> {
            match emb {
                Some(e) => {
                    let w = Self::param(p, &format!("{name}.emb.w"))?;
                    let b = Self::param(p, &format!("{name}.emb.b"))?;
                    let shift = g.linear(e, w, Some(b))?;
                    g.add_broadcast(h, shift)
                }
                None => Ok(h),
            }
        };
        let mut out_shape = vec![n];
        out_shape.extend(&self.output_shape);
        match self.arch {
            Arch::Mlp => {
                let mut h = x;
                for l in 0..self.widths.len() {
                    let name = format!("hidden.{l}");
                    h = g.linear(h, Self::param(p, &format!("{name}.w"))?, Some(Self::param(p, &format!("{name}.b"))?))?;
                    h = add_emb(g, h, &name)?;
                    h = self.act(g, h)?;
                }
                let y = g.linear(h, Self::param(p, "out.w")?, Some(Self::param(p, "out.b")?))?;
                if self.output_shape.len() == 1 {
                    Ok(y)
                } else {
                    g.reshape(y, &out_shape)
                }
            }
            Arch::Conv => {
                let conv = |g: &mut Graph<'_, T>, h: Var, name: &str| -> Result<Var> {
                    let w = Self::param(p, &format!("{name}.w"))?;
                    let b = Self::param(p, &format!("{name}.b"))?;
                    g.conv2d(h, w, Some(b), Padding::Same)
                };
                let levels = self.widths.len();
                let mut h = conv(g, x, "stem")?;
                h = self.act(g, h)?;
                let mut skips = Vec::with_capacity(levels);
                for l in 0..levels {
                    let name = format!("enc.{l}");
                    h = conv(g, h, &name)?;
                    h = add_emb(g, h, &name)?;
                    h = self.act(g, h)?;
                    if l + 1 < levels {
                        skips.push(h);
                        h = g.avg_pool2(h)?;
                        h = conv(g, h, &format!("down.{l}"))?;
                        h = self.act(g, h)?;
                    }
                }
                for l in (0..levels - 1).rev() {
                    h = g.upsample2(h)?;
                    h = conv(g, h, &format!("up.{l}"))?;
                    h = self.act(g, h)?;
                    h = g.concat(&[h, skips[l]])?;
                    let name = format!("dec.{l}");
                    h = conv(g, h, &name)?;
                    h = add_emb(g, h, &name)?;
                    h = self.act(g, h)?;
                }
                conv(g, h, "out")
            }
        }
    }

    /// Forward pass outside of training: `x [N, input_shape...]`.
    pub fn apply<T: Real>(&self, params: &ParamSet<T>, x: &Tensor<T>, cond: Option<&[f64]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.params(params);
        let xv = g.constant_ref(x);
        let y = self.forward(&mut g, &p, xv, cond)?;
        Ok(g.into_value(y))
    }
}
