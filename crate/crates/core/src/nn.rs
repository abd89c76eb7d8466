//! Named parameters, a per-step build context, and the layers every model
//! is assembled from.
//!
//! Parameters live in a flat [`Params`] map keyed by dotted names such as
//! `enc.l0.fwd.w`. A loss is built inside a [`Ctx`], which binds each
//! parameter into its graph on first use and hands back gradients keyed by
//! the same names.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Log-variance outputs are clamped to this range before use.
pub const LOGVAR_CLAMP: f64 = 14.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

pub type Grads = BTreeMap<String, Tensor>;

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    /// Names and shapes must agree; all mismatches are reported together.
    pub fn load_prefix(&mut self, other: &Params, prefix: &str) -> Result<usize> {
        let mut problems = Vec::new();
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            match self.map.get_mut(name) {
                None => problems.push(format!("{name}: not in target model")),
                Some(dst) if dst.shape() != t.shape() => problems.push(format!(
                    "{name}: shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    dst.shape()
                )),
                Some(dst) => {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        }
        for name in self.map.keys().filter(|n| n.starts_with(prefix)) {
            if !other.contains(name) {
                problems.push(format!("{name}: missing from checkpoint"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Shape(format!(
                "cannot load `{prefix}*` tensors: {}",
                problems.join("; ")
            )));
        }
        Ok(copied)
    }
}

/// Mixes integers into a well-spread 64-bit seed (splitmix64 finaliser).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Graph-building context for one loss evaluation.
pub struct Ctx<'a> {
    pub g: Graph,
    params: &'a Params,
    bound: HashMap<String, Var>,
    pub rng: ChaCha8Rng,
    pub train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a Params, seed: u64, train: bool) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            bound: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train,
        }
    }

    pub fn params(&self) -> &'a Params {
        self.params
    }

    /// The graph node for a named parameter. Panics if it does not exist,
    /// since model code and initialisation share the same names.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never initialised"))
            .clone();
        let v = self.g.param(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn standard_normal(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Runs the reverse pass and returns the loss value with gradients for
    /// every parameter that took part in the loss.
    pub fn finish(self, loss: Var) -> Result<(f64, Grads)> {
        let mut grads = self.g.backward(loss)?;
        let value = self.g.scalar(loss);
        let mut out = Grads::new();
        for (name, v) in self.bound {
            let t = grads.take(v).unwrap_or_else(|| {
                let [r, c] = self.g.shape(v);
                Tensor::zeros(r, c)
            });
            out.insert(name, t);
        }
        Ok((value, out))
    }
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over
/// parameter coordinates of a scalar loss built by `f`.
///
/// `f` is rebuilt with the same seed for every evaluation, so any sampled
/// noise is held fixed. At most `max_per_tensor` coordinates of each tensor
/// are probed, chosen deterministically.
pub fn gradcheck_params<F>(params: &Params, seed: u64, eps: f64, max_per_tensor: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("gradcheck step {eps} outside (0, 1e-2]")));
    }
    let eval = |p: &Params| -> Result<(f64, Grads)> {
        let mut ctx = Ctx::new(p, seed, true);
        let loss = f(&mut ctx)?;
        ctx.finish(loss)
    };
    let (_, grads) = eval(params)?;
    let mut pick = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6772_6164]));
    let mut worst = 0.0_f64;
    let mut p = params.clone();
    for (name, t) in params.iter() {
        let n = t.len();
        let coords: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            (0..max_per_tensor).map(|_| pick.random_range(0..n)).collect()
        };
        let analytic = grads.get(name);
        for i in coords {
            let orig = t.data()[i];
            p.get_mut(name).expect("cloned").data_mut()[i] = orig + eps;
            let (up, _) = eval(&p)?;
            p.get_mut(name).expect("cloned").data_mut()[i] = orig - eps;
            let (down, _) = eval(&p)?;
            p.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Multiplicative noise used by denoising and dropout variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dropout {
    /// Zero with probability `p`, rescale survivors by `1/(1-p)`.
    Bernoulli { p: f64 },
    /// Multiply by `N(1, gamma^2)`.
    Gaussian { gamma: f64 },
}

impl Dropout {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Dropout::Bernoulli { p } if !(p > 0.0 && p < 1.0) => {
                Err(Error::Config(format!("dropout probability {p} outside (0, 1)")))
            }
            Dropout::Gaussian { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(Error::Config(format!("gaussian dropout scale {gamma} must be positive")))
            }
            _ => Ok(()),
        }
    }

    /// Variance of the multiplier.
    pub fn variance(&self) -> f64 {
        match *self {
            Dropout::Bernoulli { p } => p / (1.0 - p),
            Dropout::Gaussian { gamma } => gamma * gamma,
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Var {
        match *self {
            Dropout::Bernoulli { p } => ctx.g.dropout_bernoulli(x, p, &mut ctx.rng),
            Dropout::Gaussian { gamma } => ctx.g.dropout_gaussian(x, gamma, &mut ctx.rng),
        }
    }
}

/// Gaussian-noise scale with the same multiplier variance as Bernoulli
/// dropout with drop probability `p`.
pub fn matched_gamma(p: f64) -> f64 {
    (p / (1.0 - p)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
        }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let a = (6.0 / (self.din + self.dout).max(1) as f64).sqrt();
        let w = (0..self.din * self.dout).map(|_| rng.random_range(-a..=a)).collect();
        params.insert(self.w(), Tensor::from_vec(self.din, self.dout, w));
        params.insert(self.b(), Tensor::zeros(1, self.dout));
    }

    /// Identity weights (requires `din == dout`), zero bias.
    pub fn init_identity(&self, params: &mut Params) {
        assert_eq!(self.din, self.dout, "identity init needs a square layer");
        params.insert(self.w(), Tensor::eye(self.din));
        params.insert(self.b(), Tensor::zeros(1, self.dout));
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(&self.w());
        let b = ctx.param(&self.b());
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }
}

/// Stack of linear layers with a shared hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
    /// Applied after every hidden activation in training mode.
    pub dropout: Option<Dropout>,
}

impl Mlp {
    /// `dims` lists input, hidden and output widths.
    pub fn new(name: &str, dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Mlp {
            layers,
            hidden,
            output,
            dropout: None,
        }
    }

    pub fn din(&self) -> usize {
        self.layers[0].din
    }

    pub fn dout(&self) -> usize {
        self.layers.last().expect("non-empty").dout
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(ctx, x);
            if i < last {
                x = self.hidden.apply(&mut ctx.g, x);
                if let (Some(d), true) = (self.dropout, ctx.train) {
                    x = d.apply(ctx, x);
                }
            } else {
                x = self.output.apply(&mut ctx.g, x);
            }
        }
        x
    }
}

/// One-direction LSTM over the rows of a `T x din` input.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub name: String,
    pub din: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, din: usize, hidden: usize) -> Self {
        Lstm {
            name: name.into(),
            din,
            hidden,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let h = self.hidden;
        let a = (6.0 / (self.din + h) as f64).sqrt();
        let w = (0..self.din * 4 * h).map(|_| rng.random_range(-a..=a)).collect();
        let a = (6.0 / (2 * h) as f64).sqrt();
        let u = (0..h * 4 * h).map(|_| rng.random_range(-a..=a)).collect();
        let mut b = Tensor::zeros(1, 4 * h);
        for j in h..2 * h {
            b.set(0, j, 1.0);
        }
        params.insert(format!("{}.w", self.name), Tensor::from_vec(self.din, 4 * h, w));
        params.insert(format!("{}.u", self.name), Tensor::from_vec(h, 4 * h, u));
        params.insert(format!("{}.b", self.name), b);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, reverse: bool) -> Var {
        let w = ctx.param(&format!("{}.w", self.name));
        let u = ctx.param(&format!("{}.u", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        ctx.g.lstm_scan(x, w, u, b, reverse)
    }
}

/// Stack of recurrent layers, bidirectional or causal, with optional
/// pairwise subsampling in front of any layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentStack {
    pub name: String,
    pub din: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    /// `pyramid[i]` halves the time axis in front of layer `i`.
    pub pyramid: Vec<bool>,
}

impl RecurrentStack {
    pub fn new(name: impl Into<String>, din: usize, hidden: usize, layers: usize, bidirectional: bool) -> Self {
        RecurrentStack {
            name: name.into(),
            din,
            hidden,
            bidirectional,
            pyramid: vec![false; layers],
        }
    }

    pub fn with_pyramid(mut self, pyramid: Vec<bool>) -> Self {
        self.pyramid = pyramid;
        self
    }

    pub fn layers(&self) -> usize {
        self.pyramid.len()
    }

    /// Width of each layer's output.
    pub fn dout(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    /// Total time-subsampling factor.
    pub fn stride(&self) -> usize {
        1 << self.pyramid.iter().filter(|p| **p).count()
    }

    fn cells(&self, i: usize) -> (Lstm, Option<Lstm>) {
        let mut din = if i == 0 { self.din } else { self.dout() };
        if self.pyramid[i] {
            din *= 2;
        }
        let h = self.hidden;
        if self.bidirectional {
            (
                Lstm::new(format!("{}.l{i}.fwd", self.name), din, h),
                Some(Lstm::new(format!("{}.l{i}.bwd", self.name), din, h)),
            )
        } else {
            (Lstm::new(format!("{}.l{i}", self.name), din, h), None)
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        for i in 0..self.layers() {
            let (f, b) = self.cells(i);
            f.init(params, rng);
            if let Some(b) = b {
                b.init(params, rng);
            }
        }
    }

    /// Output of every layer, first to last.
    pub fn forward_all(&self, ctx: &mut Ctx, mut x: Var) -> Vec<Var> {
        let mut outs = Vec::with_capacity(self.layers());
        for i in 0..self.layers() {
            if self.pyramid[i] {
                x = ctx.g.pair_concat(x);
            }
            let (f, b) = self.cells(i);
            let hf = f.forward(ctx, x, false);
            x = match b {
                Some(b) => {
                    let hb = b.forward(ctx, x, true);
                    ctx.g.concat_cols(&[hf, hb])
                }
                None => hf,
            };
            outs.push(x);
        }
        outs
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        *self.forward_all(ctx, x).last().expect("at least one layer")
    }
}

/// Maps features to the mean and log-variance of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mu: Linear,
    pub logvar: Linear,
    /// Extra `tanh` layer in front of the log-variance projection.
    pub logvar_hidden: Option<Linear>,
}

impl GaussianHead {
    pub fn linear(name: &str, din: usize, d: usize) -> Self {
        GaussianHead {
            mu: Linear::new(format!("{name}.mu"), din, d),
            logvar: Linear::new(format!("{name}.lv"), din, d),
            logvar_hidden: None,
        }
    }

    pub fn deep(name: &str, din: usize, d: usize) -> Self {
        GaussianHead {
            mu: Linear::new(format!("{name}.mu"), din, d),
            logvar: Linear::new(format!("{name}.lv"), din, d),
            logvar_hidden: Some(Linear::new(format!("{name}.lvh"), din, din)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.dout
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.mu.init(params, rng);
        self.logvar.init(params, rng);
        if let Some(h) = &self.logvar_hidden {
            h.init(params, rng);
        }
    }

    /// Returns `(mu, logvar)`, with the log-variance clamped.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> (Var, Var) {
        let mu = self.mu.forward(ctx, x);
        let h = match &self.logvar_hidden {
            Some(l) => {
                let h = l.forward(ctx, x);
                ctx.g.tanh(h)
            }
            None => x,
        };
        let lv = self.logvar.forward(ctx, h);
        let lv = ctx.g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }
}

/// `mu + kappa * eps * exp(logvar / 2)` with fresh standard-normal `eps`.
/// With `kappa == 0` the mean node itself is returned.
pub fn reparameterize(ctx: &mut Ctx, mu: Var, logvar: Var, kappa: f64) -> Var {
    if kappa == 0.0 {
        return mu;
    }
    let [r, c] = ctx.g.shape(mu);
    let eps = ctx.standard_normal(r, c).map(|e| kappa * e);
    let half = ctx.g.scale(logvar, 0.5);
    let sd = ctx.g.exp(half);
    let noise = ctx.g.mul_const(sd, eps);
    ctx.g.add(mu, noise)
}

/// Per-row `||target - pred||^2 / 2` as an `n x 1` column.
pub fn half_sq_err_rows(g: &mut Graph, target: Var, pred: Var) -> Var {
    let d = g.sub(target, pred);
    let s = g.square(d);
    let r = g.sum_cols(s);
    g.scale(r, 0.5)
}

/// `a * wa + b * wb` for scalar nodes.
pub fn weighted_sum(g: &mut Graph, a: Var, wa: f64, b: Var, wb: f64) -> Var {
    let x = g.scale(a, wa);
    let y = g.scale(b, wb);
    g.add(x, y)
}

/// Mean of several scalar nodes.
pub fn mean_of(g: &mut Graph, xs: &[Var]) -> Var {
    assert!(!xs.is_empty(), "mean of no terms");
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x);
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}
