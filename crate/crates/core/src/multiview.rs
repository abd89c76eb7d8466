//! Two-view and cross-domain variational models, label embedding and the
//! similarity losses used to tie representations together.
//!
//! All models here work on batches of stacked windows, one window per row.
//! Reconstruction terms are `||target - decoded||^2 / 2` per row and every
//! loss is averaged over rows.
//!
//! Parameter prefixes: `v.` for the two-view model, `t.` for the
//! target-domain parts of the cross-domain model, `le.` for label
//! embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctc::ctc_loss_node;
use crate::dataio::{derangement, window_stack, Utterance};
use crate::distributions::{kl_rows, DiagGaussian, PriorRows, PriorStore};
use crate::error::{Error, Result};
use crate::ffmodels::{FfModel, FfVariant};
use crate::graph::{Graph, Var};
use crate::nn::{
    half_sq_err_rows, mean_of, reparameterize, weighted_sum, Activation, Ctx, GaussianHead, Linear, Mlp, Params,
    RecurrentStack,
};
use crate::tensor::Tensor;

/// An MLP feeding a Gaussian head. The MLP is split in two so that the
/// layers nearest the input can be swapped for domain-specific ones.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussEncoder {
    pub lower: Option<Mlp>,
    pub upper: Option<Mlp>,
    pub head: GaussianHead,
}

impl GaussEncoder {
    /// `split` hidden layers go to the lower part, the rest to the upper.
    pub fn new(prefix: &str, din: usize, hidden: &[usize], split: usize, d: usize, act: Activation) -> Self {
        let split = split.min(hidden.len());
        let lower = (split > 0).then(|| {
            let mut dims = vec![din];
            dims.extend(&hidden[..split]);
            Mlp::new(&format!("{prefix}.lo"), &dims, act, act)
        });
        let mid = if split > 0 { hidden[split - 1] } else { din };
        let upper = (split < hidden.len()).then(|| {
            let mut dims = vec![mid];
            dims.extend(&hidden[split..]);
            Mlp::new(&format!("{prefix}.hi"), &dims, act, act)
        });
        let top = hidden.last().copied().unwrap_or(din);
        GaussEncoder {
            lower,
            upper,
            head: GaussianHead::linear(&format!("{prefix}.head"), top, d),
        }
    }

    /// A copy whose lower layers carry their own names.
    pub fn with_private_lower(&self, prefix: &str) -> Self {
        let mut e = self.clone();
        if let Some(lo) = e.lower.as_mut() {
            for (i, l) in lo.layers.iter_mut().enumerate() {
                l.name = format!("{prefix}.lo.l{i}");
            }
        }
        e
    }

    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    pub fn init(&self, p: &mut Params, rng: &mut impl Rng) {
        if let Some(l) = &self.lower {
            l.init(p, rng);
        }
        if let Some(u) = &self.upper {
            u.init(p, rng);
        }
        self.head.init(p, rng);
    }

    pub fn init_lower(&self, p: &mut Params, rng: &mut impl Rng) {
        if let Some(l) = &self.lower {
            l.init(p, rng);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> (Var, Var) {
        if let Some(l) = &self.lower {
            x = l.forward(ctx, x);
        }
        if let Some(u) = &self.upper {
            x = u.forward(ctx, x);
        }
        self.head.forward(ctx, x)
    }
}

fn decoder(prefix: &str, din: usize, hidden: &[usize], dout: usize, act: Activation) -> Mlp {
    let mut dims = vec![din];
    dims.extend(hidden.iter().rev());
    dims.push(dout);
    Mlp::new(prefix, &dims, act, Activation::Identity)
}

fn kappa(ctx: &Ctx) -> f64 {
    if ctx.train {
        1.0
    } else {
        0.0
    }
}

/// Windows of two views, row-aligned, with the `(utterance, step)` each row
/// came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub keys: Vec<(String, usize)>,
}

impl PairedBatch {
    pub fn new(x: Tensor, y: Tensor, keys: Vec<(String, usize)>) -> Result<Self> {
        if x.rows() != y.rows() || keys.len() != x.rows() {
            return Err(Error::Shape(format!(
                "paired batch rows differ: x {}, y {}, keys {}",
                x.rows(),
                y.rows(),
                keys.len()
            )));
        }
        Ok(PairedBatch { x, y, keys })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Windows of width `w` over both views of every utterance.
    pub fn from_utterances(utts: &[&Utterance], w: usize) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut keys = Vec::new();
        for u in utts {
            let v2 = u
                .view2
                .as_ref()
                .ok_or_else(|| Error::Config(format!("utterance `{}` has no second view", u.id)))?;
            xs.push(window_stack(&u.frames, w)?);
            ys.push(window_stack(v2, w)?);
            keys.extend((0..u.len()).map(|t| (u.id.clone(), t)));
        }
        let xr: Vec<&Tensor> = xs.iter().collect();
        let yr: Vec<&Tensor> = ys.iter().collect();
        PairedBatch::new(Tensor::concat_rows(&xr), Tensor::concat_rows(&yr), keys)
    }

    pub fn rows(&self, idx: &[usize]) -> PairedBatch {
        PairedBatch {
            x: self.x.gather_rows(idx),
            y: self.y.gather_rows(idx),
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VccapConfig {
    pub dx: usize,
    pub dy: usize,
    pub hidden: Vec<usize>,
    pub d_z: usize,
    #[serde(default)]
    pub d_h1: usize,
    #[serde(default)]
    pub d_h2: usize,
    pub beta: f64,
    #[serde(default = "tanh")]
    pub activation: Activation,
    /// Hidden layers of the shared encoder that sit below the split point.
    #[serde(default)]
    pub split: usize,
}

fn tanh() -> Activation {
    Activation::Tanh
}

impl VccapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 {
            return Err(Error::Config("shared latent needs at least one dimension".into()));
        }
        if self.dx == 0 || self.dy == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if self.split > self.hidden.len() {
            return Err(Error::Config(format!(
                "split {} exceeds the {} hidden layers",
                self.split,
                self.hidden.len()
            )));
        }
        Ok(())
    }

    /// Width of the concatenated posterior `[z | h1 | h2]`.
    pub fn posterior_dim(&self) -> usize {
        self.d_z + self.d_h1 + self.d_h2
    }
}

/// Batch-mean loss with the row-wise posterior it was computed from.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutput {
    pub loss: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Shared latent `z` inferred from the first view only, decoded into both.
#[derive(Clone, Debug, PartialEq)]
pub struct Vcca {
    pub cfg: VccapConfig,
    ez: GaussEncoder,
    dec_x: Mlp,
    dec_y: Mlp,
}

impl Vcca {
    /// Private dimensions in `cfg` are ignored.
    pub fn new(cfg: VccapConfig) -> Result<Self> {
        cfg.validate()?;
        let act = cfg.activation;
        Ok(Vcca {
            ez: GaussEncoder::new("v.ez", cfg.dx, &cfg.hidden, cfg.split, cfg.d_z, act),
            dec_x: decoder("v.decx", cfg.d_z, &cfg.hidden, cfg.dx, act),
            dec_y: decoder("v.decy", cfg.d_z, &cfg.hidden, cfg.dy, act),
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.ez.init(&mut p, &mut rng);
        self.dec_x.init(&mut p, &mut rng);
        self.dec_y.init(&mut p, &mut rng);
        p
    }

    /// `-(E log p(x|z) + E log p(y|z) - beta KL(q(z|x) || prior))`.
    pub fn loss(&self, ctx: &mut Ctx, batch: &PairedBatch, prior: Option<&PriorRows>) -> Result<ViewOutput> {
        check_dims(&self.cfg, batch)?;
        let x = ctx.input(batch.x.clone());
        let y = ctx.input(batch.y.clone());
        let (mu, lv) = self.ez.forward(ctx, x);
        let k = kappa(ctx);
        let z = reparameterize(ctx, mu, lv, k);
        let xr = self.dec_x.forward(ctx, z);
        let yr = self.dec_y.forward(ctx, z);
        let rx = half_sq_err_rows(&mut ctx.g, x, xr);
        let ry = half_sq_err_rows(&mut ctx.g, y, yr);
        let kl = kl_rows(&mut ctx.g, mu, lv, prior);
        let r = ctx.g.add(rx, ry);
        let kl = ctx.g.scale(kl, self.cfg.beta);
        let rows = ctx.g.add(r, kl);
        let loss = ctx.g.mean(rows);
        Ok(ViewOutput { loss, mu, logvar: lv })
    }

    pub fn features(&self, params: &Params, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(params, 0, false);
        let xv = ctx.input(x.clone());
        let (mu, _) = self.ez.forward(&mut ctx, xv);
        ctx.value(mu).clone()
    }
}

fn check_dims(cfg: &VccapConfig, batch: &PairedBatch) -> Result<()> {
    if batch.x.cols() != cfg.dx {
        return Err(Error::DimMismatch {
            context: "first view width",
            expected: cfg.dx,
            got: batch.x.cols(),
        });
    }
    if batch.y.cols() != cfg.dy {
        return Err(Error::DimMismatch {
            context: "second view width",
            expected: cfg.dy,
            got: batch.y.cols(),
        });
    }
    Ok(())
}

/// VCCA with private latents `h1` (from the first view) and `h2` (from the
/// second), each decoded together with the shared `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vccap {
    pub cfg: VccapConfig,
    pub ez: GaussEncoder,
    eh1: Option<GaussEncoder>,
    eh2: Option<GaussEncoder>,
    dec_x: Mlp,
    dec_y: Mlp,
}

impl Vccap {
    pub fn new(cfg: VccapConfig) -> Result<Self> {
        cfg.validate()?;
        let act = cfg.activation;
        let h = &cfg.hidden;
        Ok(Vccap {
            ez: GaussEncoder::new("v.ez", cfg.dx, h, cfg.split, cfg.d_z, act),
            eh1: (cfg.d_h1 > 0).then(|| GaussEncoder::new("v.eh1", cfg.dx, h, 0, cfg.d_h1, act)),
            eh2: (cfg.d_h2 > 0).then(|| GaussEncoder::new("v.eh2", cfg.dy, h, 0, cfg.d_h2, act)),
            dec_x: decoder("v.decx", cfg.d_z + cfg.d_h1, h, cfg.dx, act),
            dec_y: decoder("v.decy", cfg.d_z + cfg.d_h2, h, cfg.dy, act),
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        self.init_into(&mut p, seed);
        p
    }

    pub fn init_into(&self, p: &mut Params, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.ez.init(p, &mut rng);
        self.dec_x.init(p, &mut rng);
        self.dec_y.init(p, &mut rng);
        for e in [&self.eh1, &self.eh2].into_iter().flatten() {
            e.init(p, &mut rng);
        }
    }

    /// Negative ELBO with three KL terms, each weighted by `beta`. A given
    /// `prior` covers the concatenated posterior `[z | h1 | h2]`.
    pub fn loss(&self, ctx: &mut Ctx, batch: &PairedBatch, prior: Option<&PriorRows>) -> Result<ViewOutput> {
        check_dims(&self.cfg, batch)?;
        let x = ctx.input(batch.x.clone());
        let y = ctx.input(batch.y.clone());
        let k = kappa(ctx);
        let (mz, lz) = self.ez.forward(ctx, x);
        let z = reparameterize(ctx, mz, lz, k);
        let mut mus = vec![mz];
        let mut lvs = vec![lz];
        let mut xin = vec![z];
        let mut yin = vec![z];
        if let Some(e) = &self.eh1 {
            let (m, l) = e.forward(ctx, x);
            xin.push(reparameterize(ctx, m, l, k));
            mus.push(m);
            lvs.push(l);
        }
        if let Some(e) = &self.eh2 {
            let (m, l) = e.forward(ctx, y);
            yin.push(reparameterize(ctx, m, l, k));
            mus.push(m);
            lvs.push(l);
        }
        let zx = ctx.g.concat_cols(&xin);
        let zy = ctx.g.concat_cols(&yin);
        let xr = self.dec_x.forward(ctx, zx);
        let yr = self.dec_y.forward(ctx, zy);
        let rx = half_sq_err_rows(&mut ctx.g, x, xr);
        let ry = half_sq_err_rows(&mut ctx.g, y, yr);
        let mut rows = ctx.g.add(rx, ry);
        let mut start = 0;
        for (&m, &l) in mus.iter().zip(&lvs) {
            let d = ctx.g.shape(m)[1];
            let p = prior.map(|p| p.slice_cols(start, d));
            let kl = kl_rows(&mut ctx.g, m, l, p.as_ref());
            let kl = ctx.g.scale(kl, self.cfg.beta);
            rows = ctx.g.add(rows, kl);
            start += d;
        }
        let loss = ctx.g.mean(rows);
        let mu = ctx.g.concat_cols(&mus);
        let logvar = ctx.g.concat_cols(&lvs);
        Ok(ViewOutput { loss, mu, logvar })
    }

    pub fn features(&self, params: &Params, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(params, 0, false);
        let xv = ctx.input(x.clone());
        let (mu, _) = self.ez.forward(&mut ctx, xv);
        ctx.value(mu).clone()
    }
}

/// The model whose standard-normal prior is replaced by stored priors.
#[derive(Clone, Copy, Debug)]
pub enum PriorBase<'a> {
    Vae(&'a FfModel),
    Vcca(&'a Vcca),
    Vccap(&'a Vccap),
}

impl PriorBase<'_> {
    pub fn posterior_dim(&self) -> usize {
        match self {
            PriorBase::Vae(m) => m.cfg.latent,
            PriorBase::Vcca(m) => m.cfg.d_z,
            PriorBase::Vccap(m) => m.cfg.posterior_dim(),
        }
    }

    /// The base loss with an optional row-aligned prior.
    pub fn loss(&self, ctx: &mut Ctx, batch: &PairedBatch, prior: Option<&PriorRows>) -> Result<Var> {
        Ok(match self {
            PriorBase::Vae(m) => {
                if !matches!(m.cfg.variant, FfVariant::Vae { .. }) {
                    return Err(Error::Config("prior updating needs the vae variant".into()));
                }
                let x = ctx.input(batch.x.clone());
                m.loss_var(ctx, x, prior)?.loss
            }
            PriorBase::Vcca(m) => m.loss(ctx, batch, prior)?.loss,
            PriorBase::Vccap(m) => m.loss(ctx, batch, prior)?.loss,
        })
    }

    /// Posterior means and log-variances, computed in eval mode.
    pub fn posteriors(&self, params: &Params, batch: &PairedBatch) -> Result<PriorRows> {
        let mut ctx = Ctx::new(params, 0, false);
        let (mu, lv) = match self {
            PriorBase::Vae(m) => {
                let x = ctx.input(batch.x.clone());
                let (mu, lv) = m.encode(&mut ctx, x);
                let lv = lv.ok_or_else(|| Error::Config("prior updating needs the vae variant".into()))?;
                (mu, lv)
            }
            PriorBase::Vcca(m) => {
                let o = m.loss(&mut ctx, batch, None)?;
                (o.mu, o.logvar)
            }
            PriorBase::Vccap(m) => {
                let o = m.loss(&mut ctx, batch, None)?;
                (o.mu, o.logvar)
            }
        };
        Ok(PriorRows {
            mu: ctx.value(mu).clone(),
            logvar: ctx.value(lv).clone(),
        })
    }

    /// A store holding the current posterior of every row of `batch`.
    pub fn snapshot(&self, params: &Params, batch: &PairedBatch, tag: u64) -> Result<PriorStore> {
        let post = self.posteriors(params, batch)?;
        let mut store = PriorStore::new(tag, post.dim());
        for (i, (id, t)) in batch.keys.iter().enumerate() {
            let q = DiagGaussian::new(post.mu.row_slice(i).to_vec(), post.logvar.row_slice(i).to_vec())?;
            store.insert(id, *t, q)?;
        }
        Ok(store)
    }
}

/// The base loss with every KL taken against the stored prior of its row.
/// Stored priors are constants.
pub fn prior_updated_loss(ctx: &mut Ctx, base: PriorBase, batch: &PairedBatch, store: &PriorStore) -> Result<Var> {
    if store.dim() != base.posterior_dim() {
        return Err(Error::DimMismatch {
            context: "prior store width",
            expected: base.posterior_dim(),
            got: store.dim(),
        });
    }
    let prior = store.gather(&batch.keys)?;
    base.loss(ctx, batch, Some(&prior))
}

/// How much of the shared encoder the target domain reuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sharing {
    Full,
    /// The first `split` hidden layers are domain-specific.
    Partial { split: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossDomainConfig {
    pub vccap: VccapConfig,
    /// Width of the target-domain private latent.
    #[serde(default)]
    pub d_ht: usize,
    pub sharing: Sharing,
}

/// VCCAP on paired source data plus a VAE with a private latent (VAEP) on
/// target-domain frames, sharing all or the upper part of the `z` encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossDomain {
    pub vccap: Vccap,
    tz: GaussEncoder,
    th: Option<GaussEncoder>,
    tdec: Mlp,
    rec: Option<(RecurrentStack, Linear)>,
}

impl CrossDomain {
    pub fn new(cfg: CrossDomainConfig) -> Result<Self> {
        let mut vc = cfg.vccap.clone();
        vc.split = match cfg.sharing {
            Sharing::Full => 0,
            Sharing::Partial { split } => {
                if split == 0 {
                    return Err(Error::Config("partial sharing needs at least one private layer".into()));
                }
                split
            }
        };
        let vccap = Vccap::new(vc)?;
        let tz = match cfg.sharing {
            Sharing::Full => vccap.ez.clone(),
            Sharing::Partial { .. } => vccap.ez.with_private_lower("t.ez"),
        };
        let c = &vccap.cfg;
        let th = (cfg.d_ht > 0).then(|| GaussEncoder::new("t.eh", c.dx, &c.hidden, 0, cfg.d_ht, c.activation));
        let tdec = decoder("t.dec", c.d_z + cfg.d_ht, &c.hidden, c.dx, c.activation);
        Ok(CrossDomain {
            vccap,
            tz,
            th,
            tdec,
            rec: None,
        })
    }

    /// Adds a target-domain recogniser on the VAEP posterior means.
    pub fn with_recognizer(mut self, hidden: usize, layers: usize, vocab: usize) -> Self {
        let rec = RecurrentStack::new("t.rec", self.vccap.cfg.d_z, hidden, layers, true);
        let out = Linear::new("t.out", rec.dout(), vocab + 1);
        self.rec = Some((rec, out));
        self
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = self.vccap.init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7467);
        if self.tz != self.vccap.ez {
            self.tz.init_lower(&mut p, &mut rng);
        }
        if let Some(h) = &self.th {
            h.init(&mut p, &mut rng);
        }
        self.tdec.init(&mut p, &mut rng);
        if let Some((r, o)) = &self.rec {
            r.init(&mut p, &mut rng);
            o.init(&mut p, &mut rng);
        }
        p
    }

    /// `-(E log p(x|z,h) - beta KL(q(z|x)) - beta KL(q(h|x)))` on
    /// target-domain windows.
    pub fn vaep_loss(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Var> {
        let beta = self.vccap.cfg.beta;
        let xv = ctx.input(x.clone());
        let k = kappa(ctx);
        let (mz, lz) = self.tz.forward(ctx, xv);
        let z = reparameterize(ctx, mz, lz, k);
        let mut parts = vec![z];
        let mut kls = vec![kl_rows(&mut ctx.g, mz, lz, None)];
        if let Some(e) = &self.th {
            let (m, l) = e.forward(ctx, xv);
            parts.push(reparameterize(ctx, m, l, k));
            kls.push(kl_rows(&mut ctx.g, m, l, None));
        }
        let zin = ctx.g.concat_cols(&parts);
        let xr = self.tdec.forward(ctx, zin);
        let mut rows = half_sq_err_rows(&mut ctx.g, xv, xr);
        for kl in kls {
            let kl = ctx.g.scale(kl, beta);
            rows = ctx.g.add(rows, kl);
        }
        Ok(ctx.g.mean(rows))
    }

    /// `(1 - beta_mix) VCCAP(src) + beta_mix VAEP(tgt)`.
    pub fn loss(&self, ctx: &mut Ctx, src: &PairedBatch, tgt: &Tensor, beta_mix: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&beta_mix) {
            return Err(Error::Config(format!("domain weight {beta_mix} outside [0, 1]")));
        }
        if src.is_empty() || tgt.rows() == 0 {
            return Err(Error::Config("each domain needs at least one row in the batch".into()));
        }
        let s = self.vccap.loss(ctx, src, None)?.loss;
        let t = self.vaep_loss(ctx, tgt)?;
        Ok(weighted_sum(&mut ctx.g, s, 1.0 - beta_mix, t, beta_mix))
    }

    /// `alpha {(1 - beta_mix) VCCAP + beta_mix VAEP} + (1 - alpha) CTC`,
    /// where CTC reads the posterior means of each target utterance's
    /// windows. The VAEP term covers all target windows of the batch.
    pub fn multitask_loss(
        &self,
        ctx: &mut Ctx,
        src: &PairedBatch,
        tgt: &[&Utterance],
        window: usize,
        alpha: f64,
        beta_mix: f64,
    ) -> Result<Var> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("multitask weight {alpha} outside [0, 1]")));
        }
        let (rec, out) = self
            .rec
            .as_ref()
            .ok_or_else(|| Error::Config("cross-domain model has no recogniser".into()))?;
        let wins = tgt
            .iter()
            .map(|u| window_stack(&u.frames, window))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<&Tensor> = wins.iter().collect();
        let unsup = self.loss(ctx, src, &Tensor::concat_rows(&all), beta_mix)?;
        let mut ctcs = Vec::with_capacity(tgt.len());
        for (u, w) in tgt.iter().zip(&wins) {
            let tr = u
                .transcript
                .as_ref()
                .ok_or_else(|| Error::Config(format!("utterance `{}` has no transcript", u.id)))?;
            let xv = ctx.input(w.clone());
            let (mu, _) = self.tz.forward(ctx, xv);
            let h = rec.forward(ctx, mu);
            let logits = out.forward(ctx, h);
            let lp = ctx.g.log_softmax(logits);
            ctcs.push(ctc_loss_node(&mut ctx.g, lp, tr)?);
        }
        let ctc = mean_of(&mut ctx.g, &ctcs);
        Ok(weighted_sum(&mut ctx.g, unsup, alpha, ctc, 1.0 - alpha))
    }

    /// Posterior means of the target-domain `z` encoder.
    pub fn target_features(&self, params: &Params, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(params, 0, false);
        let xv = ctx.input(x.clone());
        let (mu, _) = self.tz.forward(&mut ctx, xv);
        ctx.value(mu).clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimilarityLoss {
    /// Mean squared distance between paired rows.
    L2,
    /// Negative mean cosine similarity.
    Cosine,
    /// Hinge on cosine similarity against permuted-row negatives.
    Contrastive { margin: f64, negatives: usize },
    /// Negative total canonical correlation with ridge terms, plus `lambda`
    /// times the squared residual of the whitening constraints.
    Cca { rx: f64, ry: f64, lambda: f64 },
}

impl SimilarityLoss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SimilarityLoss::Contrastive { margin, negatives } if !(margin >= 0.0) || negatives == 0 => Err(
                Error::Config("contrastive loss needs a non-negative margin and at least one negative".into()),
            ),
            SimilarityLoss::Cca { rx, ry, lambda } if !(rx > 0.0 && ry > 0.0 && lambda >= 0.0) => Err(Error::Config(
                "CCA loss needs positive ridge terms and a non-negative penalty".into(),
            )),
            _ => Ok(()),
        }
    }
}

const NORM_EPS: f64 = 1e-12;

/// Row-wise cosine similarity, `n x 1`.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let ab = g.mul(a, b);
    let dot = g.sum_cols(ab);
    let norm = |g: &mut Graph, v: Var| {
        let s = g.square(v);
        let s = g.sum_cols(s);
        let s = g.add_scalar(s, NORM_EPS);
        g.sqrt(s)
    };
    let na = norm(g, a);
    let nb = norm(g, b);
    let den = g.mul(na, nb);
    g.div(dot, den)
}

/// `mean(max(cos(a, b') - cos(a, b) + margin, 0))` over rows and the given
/// negative row orders of `b`.
pub fn contrastive_loss(g: &mut Graph, a: Var, b: Var, negatives: &[Vec<usize>], margin: f64) -> Var {
    let pos = cosine_rows(g, a, b);
    let mut terms = Vec::with_capacity(negatives.len());
    for perm in negatives {
        let bn = g.gather_rows(b, perm);
        let neg = cosine_rows(g, a, bn);
        let d = g.sub(neg, pos);
        let d = g.add_scalar(d, margin);
        let h = g.relu(d);
        terms.push(g.mean(h));
    }
    mean_of(g, &terms)
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut out = Tensor::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

fn inv_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite { node: 0, op: "cca" });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Total canonical correlation between the rows of `a` and `b` (sum of the
/// singular values of `S11^-1/2 S12 S22^-1/2`, covariances over `n` with
/// ridges `rx`, `ry`) and its gradients with respect to `a` and `b`.
pub fn cca_corr(a: &Tensor, b: &Tensor, rx: f64, ry: f64) -> Result<(f64, Tensor, Tensor)> {
    if a.rows() != b.rows() || a.rows() < 2 {
        return Err(Error::Shape("CCA needs two views with the same number (>= 2) of rows".into()));
    }
    let n = a.rows() as f64;
    let center = |m: DMatrix<f64>| {
        let mut m = m;
        for mut c in m.column_iter_mut() {
            let mean = c.sum() / n;
            c.add_scalar_mut(-mean);
        }
        m
    };
    let h1 = center(to_dmatrix(a));
    let h2 = center(to_dmatrix(b));
    let (d1, d2) = (h1.ncols(), h2.ncols());
    let s11 = h1.transpose() * &h1 / n + DMatrix::identity(d1, d1) * rx;
    let s22 = h2.transpose() * &h2 / n + DMatrix::identity(d2, d2) * ry;
    let s12 = h1.transpose() * &h2 / n;
    let r1 = inv_sqrt(s11)?;
    let r2 = inv_sqrt(s22)?;
    let t = &r1 * &s12 * &r2;
    let svd = t.svd(true, true);
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let dvals = &svd.singular_values;
    let corr = dvals.sum();
    if !corr.is_finite() {
        return Err(Error::NonFinite { node: 0, op: "cca" });
    }
    let dmat = DMatrix::from_diagonal(dvals);
    let g12 = &r1 * u * vt * &r2;
    let g11 = &r1 * u * &dmat * u.transpose() * &r1 * -0.5;
    let v = vt.transpose();
    let g22 = &r2 * &v * &dmat * v.transpose() * &r2 * -0.5;
    let ga = (&h1 * &g11 * 2.0 + &h2 * g12.transpose()) / n;
    let gb = (&h2 * &g22 * 2.0 + &h1 * &g12) / n;
    Ok((corr, from_dmatrix(&ga), from_dmatrix(&gb)))
}

/// `-corr(a, b)` as a graph node.
pub fn cca_loss_node(g: &mut Graph, a: Var, b: Var, rx: f64, ry: f64) -> Result<Var> {
    let (corr, ga, gb) = cca_corr(g.value(a), g.value(b), rx, ry)?;
    Ok(g.custom("cca", &[a, b], Tensor::scalar(-corr), move |up| {
        let k = -up.item();
        vec![ga.map(|v| v * k), gb.map(|v| v * k)]
    }))
}

fn constraint_residual(g: &mut Graph, e: Var, r: f64) -> Var {
    let [n, d] = g.shape(e);
    let et = g.transpose(e);
    let c = g.matmul(et, e);
    let c = g.scale(c, 1.0 / n as f64);
    let shift = g.constant(Tensor::eye(d).map(|v| v * (r - 1.0)));
    let c = g.add(c, shift);
    let s = g.square(c);
    g.sum(s)
}

/// Similarity loss between paired rows of `a` and `b`. Contrastive
/// negatives are drawn from `ctx.rng` as row derangements.
pub fn similarity_loss(ctx: &mut Ctx, a: Var, b: Var, cfg: &SimilarityLoss) -> Result<Var> {
    cfg.validate()?;
    if ctx.g.shape(a) != ctx.g.shape(b) {
        return Err(Error::Shape(format!(
            "similarity loss views differ: {:?} vs {:?}",
            ctx.g.shape(a),
            ctx.g.shape(b)
        )));
    }
    let g = &mut ctx.g;
    Ok(match *cfg {
        SimilarityLoss::L2 => {
            let d = g.sub(a, b);
            let s = g.square(d);
            let r = g.sum_cols(s);
            g.mean(r)
        }
        SimilarityLoss::Cosine => {
            let c = cosine_rows(g, a, b);
            let m = g.mean(c);
            g.neg(m)
        }
        SimilarityLoss::Contrastive { margin, negatives } => {
            let n = ctx.g.shape(a)[0];
            let negs: Vec<Vec<usize>> = (0..negatives).map(|_| derangement(n, &mut ctx.rng)).collect();
            contrastive_loss(&mut ctx.g, a, b, &negs, margin)
        }
        SimilarityLoss::Cca { rx, ry, lambda } => {
            let l = cca_loss_node(g, a, b, rx, ry)?;
            if lambda > 0.0 {
                let p1 = constraint_residual(g, a, rx);
                let p2 = constraint_residual(g, b, ry);
                let p = g.add(p1, p2);
                weighted_sum(g, l, 1.0, p, lambda)
            } else {
                l
            }
        }
    })
}

/// Label windows of width `w` (edge labels replicated), one per frame.
pub fn label_windows(labels: &[usize], w: usize) -> Result<Vec<Vec<usize>>> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::Config(format!("label window {w} must be odd and positive")));
    }
    let k = (w / 2) as isize;
    let last = labels.len() as isize - 1;
    Ok((0..labels.len() as isize)
        .map(|t| (-k..=k).map(|o| labels[(t + o).clamp(0, last) as usize]).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEmbedConfig {
    /// Width of an acoustic window.
    pub input_dim: usize,
    pub label_window: usize,
    pub vocab: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub beta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub similarity: SimilarityLoss,
    #[serde(default = "tanh")]
    pub activation: Activation,
}

impl LabelEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.alpha1 + self.alpha2 <= 1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "label embedding weights need alpha1, alpha2 >= 0 and alpha1 + alpha2 <= 1 (got {}, {})",
                self.alpha1, self.alpha2
            )));
        }
        if self.label_window == 0 || self.label_window % 2 == 0 {
            return Err(Error::Config("label window must be odd".into()));
        }
        if self.vocab < 2 || self.latent == 0 || self.input_dim == 0 {
            return Err(Error::Config("label embedding widths must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        self.similarity.validate()
    }
}

/// Acoustic and label-window encoders sharing one decoder that predicts the
/// label window.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedding {
    pub cfg: LabelEmbedConfig,
    ac: GaussEncoder,
    lb: GaussEncoder,
    dec: Mlp,
}

impl LabelEmbedding {
    pub fn new(cfg: LabelEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.label_window * cfg.vocab;
        Ok(LabelEmbedding {
            ac: GaussEncoder::new("le.ac", cfg.input_dim, &cfg.hidden, 0, cfg.latent, cfg.activation),
            lb: GaussEncoder::new("le.lb", out, &cfg.hidden, 0, cfg.latent, cfg.activation),
            dec: decoder("le.dec", cfg.latent, &cfg.hidden, out, cfg.activation),
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.ac.init(&mut p, &mut rng);
        self.lb.init(&mut p, &mut rng);
        self.dec.init(&mut p, &mut rng);
        p
    }

    fn one_hot(&self, windows: &[Vec<usize>]) -> Result<Tensor> {
        let (w, v) = (self.cfg.label_window, self.cfg.vocab);
        let mut t = Tensor::zeros(windows.len(), w * v);
        for (i, win) in windows.iter().enumerate() {
            if win.len() != w {
                return Err(Error::DimMismatch {
                    context: "label window",
                    expected: w,
                    got: win.len(),
                });
            }
            for (j, &l) in win.iter().enumerate() {
                if l >= v {
                    return Err(Error::Format(format!("label {l} outside vocabulary of {v}")));
                }
                t.set(i, j * v + l, 1.0);
            }
        }
        Ok(t)
    }

    /// Per-row cross-entropy of the label window under decoded logits.
    fn window_ce(&self, g: &mut Graph, logits: Var, windows: &[Vec<usize>]) -> Var {
        let v = self.cfg.vocab;
        let mut total: Option<Var> = None;
        for j in 0..self.cfg.label_window {
            let block = g.slice_cols(logits, j * v, v);
            let lp = g.log_softmax(block);
            let at: Vec<(usize, usize)> = windows.iter().enumerate().map(|(i, w)| (i, w[j])).collect();
            let picked = g.gather(lp, &at);
            let nll = g.neg(picked);
            total = Some(match total {
                Some(t) => g.add(t, nll),
                None => nll,
            });
        }
        total.expect("label window is non-empty")
    }

    /// `alpha1 L_acoustic + alpha2 L_similarity + (1 - alpha1 - alpha2) L_label`.
    /// Both branch losses include `beta` times their KL term.
    pub fn loss(&self, ctx: &mut Ctx, x: &Tensor, windows: &[Vec<usize>]) -> Result<Var> {
        if x.rows() != windows.len() {
            return Err(Error::Shape("one label window per acoustic window is required".into()));
        }
        if x.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "acoustic window",
                expected: self.cfg.input_dim,
                got: x.cols(),
            });
        }
        let c = &self.cfg;
        let k = kappa(ctx);
        let xv = ctx.input(x.clone());
        let lv_in = ctx.input(self.one_hot(windows)?);
        let branch = |ctx: &mut Ctx, enc: &GaussEncoder, input: Var| {
            let (mu, lv) = enc.forward(ctx, input);
            let z = reparameterize(ctx, mu, lv, k);
            let logits = self.dec.forward(ctx, z);
            let ce = self.window_ce(&mut ctx.g, logits, windows);
            let kl = kl_rows(&mut ctx.g, mu, lv, None);
            let kl = ctx.g.scale(kl, c.beta);
            let rows = ctx.g.add(ce, kl);
            (ctx.g.mean(rows), mu)
        };
        let (l_ac, mu) = branch(ctx, &self.ac, xv);
        let (l_lb, mu_hat) = branch(ctx, &self.lb, lv_in);
        let l_sim = similarity_loss(ctx, mu, mu_hat, &c.similarity)?;
        let a = weighted_sum(&mut ctx.g, l_ac, c.alpha1, l_sim, c.alpha2);
        Ok(weighted_sum(&mut ctx.g, a, 1.0, l_lb, 1.0 - c.alpha1 - c.alpha2))
    }

    /// Acoustic posterior means.
    pub fn features(&self, params: &Params, x: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(params, 0, false);
        let xv = ctx.input(x.clone());
        let (mu, _) = self.ac.forward(&mut ctx, xv);
        ctx.value(mu).clone()
    }

    /// Label-window probabilities predicted from acoustic posterior means,
    /// one `label_window x vocab` matrix per row of `x`.
    pub fn predict_windows(&self, params: &Params, x: &Tensor) -> Vec<Tensor> {
        let mut ctx = Ctx::new(params, 0, false);
        let xv = ctx.input(x.clone());
        let (mu, _) = self.ac.forward(&mut ctx, xv);
        let logits = self.dec.forward(&mut ctx, mu);
        let logits = ctx.value(logits);
        let (w, v) = (self.cfg.label_window, self.cfg.vocab);
        (0..x.rows())
            .map(|i| {
                let t = Tensor::from_vec(w, v, logits.row_slice(i).to_vec());
                crate::graph::softmax_rows(&t)
            })
            .collect()
    }
}

/// Probabilities below this are raised to it before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

/// Per-frame log scores from overlapping window predictions.
///
/// `preds[s]` is a `W x L` matrix predicting labels of frames
/// `s-K..=s+K`. Frame `t` averages, in log space, the rows that the windows
/// covering it assign to it; near the edges fewer windows take part. The
/// flag reports whether any probability was floored.
pub fn geometric_mean_scores(preds: &[Tensor]) -> Result<(Tensor, bool)> {
    let first = preds.first().ok_or_else(|| Error::Shape("no window predictions".into()))?;
    let (w, l) = (first.rows(), first.cols());
    if w % 2 == 0 {
        return Err(Error::Config(format!("window of {w} predictions must be odd")));
    }
    if preds.iter().any(|p| p.shape() != [w, l]) {
        return Err(Error::Shape("window predictions differ in shape".into()));
    }
    let k = w / 2;
    let t_len = preds.len();
    let mut floored = false;
    let mut out = Tensor::zeros(t_len, l);
    for t in 0..t_len {
        let lo = t.saturating_sub(k);
        let hi = (t + k).min(t_len - 1);
        let count = (hi - lo + 1) as f64;
        for s in lo..=hi {
            let row = preds[s].row_slice(t + k - s);
            for (o, &p) in out.row_slice_mut(t).iter_mut().zip(row) {
                if !(p >= PROB_FLOOR) {
                    floored = true;
                }
                *o += p.max(PROB_FLOOR).ln() / count;
            }
        }
    }
    Ok((out, floored))
}

/// Arg-max of [`geometric_mean_scores`] per frame.
pub fn geometric_mean_predict(preds: &[Tensor]) -> Result<(Vec<usize>, bool)> {
    let (s, floored) = geometric_mean_scores(preds)?;
    let labels = (0..s.rows())
        .map(|t| {
            let row = s.row_slice(t);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok((labels, floored))
}

/// Monte Carlo estimate of `KL(q || mixture)` where the mixture weights
/// the `neighbors` equally. Returns the estimate and its standard error.
pub fn window_mixture_prior_kl<R: Rng + ?Sized>(
    q: &DiagGaussian,
    neighbors: &[DiagGaussian],
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if neighbors.is_empty() {
        return Err(Error::Config("window mixture prior needs at least one neighbour".into()));
    }
    if samples < 2 {
        return Err(Error::Config("need at least two Monte Carlo samples".into()));
    }
    if let Some(n) = neighbors.iter().find(|n| n.dim() != q.dim()) {
        return Err(Error::DimMismatch {
            context: "mixture component",
            expected: q.dim(),
            got: n.dim(),
        });
    }
    let ln_k = (neighbors.len() as f64).ln();
    let sd: Vec<f64> = q.logvar.iter().map(|l| (l / 2.0).exp()).collect();
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut z = vec![0.0; q.dim()];
    let mut comps = vec![0.0; neighbors.len()];
    for _ in 0..samples {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = q.mu[i] + sd[i] * rng.sample::<f64, _>(StandardNormal);
        }
        for (c, n) in comps.iter_mut().zip(neighbors) {
            *c = n.log_density(&z);
        }
        let v = q.log_density(&z) - (crate::graph::logsumexp(&comps) - ln_k);
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_window_edges() {
        let w = label_windows(&[0, 1, 2], 3).unwrap();
        assert_eq!(w, vec![vec![0, 0, 1], vec![0, 1, 2], vec![1, 2, 2]]);
        assert!(label_windows(&[0], 2).is_err());
    }

    #[test]
    fn alpha_constraint() {
        let cfg = LabelEmbedConfig {
            input_dim: 3,
            label_window: 3,
            vocab: 2,
            hidden: vec![4],
            latent: 2,
            beta: 0.1,
            alpha1: 0.7,
            alpha2: 0.5,
            similarity: SimilarityLoss::L2,
            activation: Activation::Tanh,
        };
        assert!(LabelEmbedding::new(cfg).is_err());
    }

    #[test]
    fn geometric_mean_hand_example() {
        // Two frames, window 3, two labels. Frame 0 is covered by the centre
        // row of window 0 and the first row of window 1.
        let p0 = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
        let p1 = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let (s, floored) = geometric_mean_scores(&[p0, p1]).unwrap();
        assert!(!floored);
        assert!((s.get(0, 0).exp() - (0.2f64 * 0.6).sqrt()).abs() < 1e-12);
        assert!((s.get(0, 1).exp() - (0.8f64 * 0.4).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_floored() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let (labels, floored) = geometric_mean_predict(&[p]).unwrap();
        assert!(floored);
        assert_eq!(labels, vec![1]);
    }

    #[test]
    fn cross_domain_requires_both_domains() {
        let cfg = CrossDomainConfig {
            vccap: VccapConfig {
                dx: 3,
                dy: 2,
                hidden: vec![4],
                d_z: 2,
                d_h1: 1,
                d_h2: 1,
                beta: 1.0,
                activation: Activation::Tanh,
                split: 0,
            },
            d_ht: 1,
            sharing: Sharing::Full,
        };
        let m = CrossDomain::new(cfg).unwrap();
        let p = m.init(0);
        let mut ctx = Ctx::new(&p, 0, true);
        let src = PairedBatch::new(Tensor::zeros(0, 3), Tensor::zeros(0, 2), vec![]).unwrap();
        assert!(m.loss(&mut ctx, &src, &Tensor::zeros(2, 3), 0.5).is_err());
    }
}
