//! Recurrent variational representation models.
//!
//! A bidirectional recurrent encoder turns `x_{1:T}` into `h_{1:T'}`, and
//! each step gets its own diagonal Gaussian posterior `q(z_t | h_t)`. With
//! pyramidal layers `T' = floor(T / s)` for stride `s`, and step `k`
//! reconstructs the concatenation of the `s` frames it covers.
//!
//! Two samples are drawn per step in training mode: `mu + d2 * sigma` feeds
//! the decoder and `mu + kappa * d1 * sigma` feeds the supervised head. In
//! evaluation mode both are the posterior mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::ctc_loss_node;
use crate::dataio::{build_recon_targets, ReconTargetSpec, Utterance};
use crate::distributions::{kl_rows, DiagGaussian, PriorRows, PriorStore};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{
    half_sq_err_rows, mean_of, reparameterize, weighted_sum, Activation, Ctx, GaussianHead, Linear, Mlp, Params,
    RecurrentStack,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    #[default]
    None,
    /// `r_t` from `h_t`, decoder reads `[z_t, r_t]`.
    Flat,
    /// `r_t` from `[h_t, z_t]`, decoder reads `r_t` only.
    Hierarchical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Per-step cross-entropy against frame labels.
    #[default]
    Framewise,
    /// CTC against the transcript.
    Ctc,
}

/// When stored priors are refreshed from the current posteriors. Epochs
/// count from 1 and the refresh happens at the end of a firing epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSchedule {
    pub start_epoch: usize,
    #[serde(default = "one")]
    pub every: usize,
    /// Fire on epochs that improve the held-out loss instead of on a fixed
    /// cadence.
    #[serde(default)]
    pub on_best: bool,
}

fn one() -> usize {
    1
}

impl PriorSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.start_epoch == 0 || self.every == 0 {
            return Err(Error::Config("prior updates need start_epoch >= 1 and every >= 1".into()));
        }
        Ok(())
    }

    pub fn fires(&self, epoch: usize, improved: bool) -> bool {
        if epoch < self.start_epoch {
            return false;
        }
        if self.on_best {
            improved
        } else {
            (epoch - self.start_epoch) % self.every == 0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecRepConfig {
    pub input_dim: usize,
    pub hidden: usize,
    #[serde(default = "two")]
    pub shared_layers: usize,
    /// Recurrent layers private to the supervised head.
    #[serde(default = "one")]
    pub private_layers: usize,
    /// Per shared layer; empty means no subsampling.
    #[serde(default)]
    pub pyramid: Vec<bool>,
    pub latent: usize,
    #[serde(default)]
    pub aux: AuxMode,
    #[serde(default)]
    pub aux_dim: usize,
    #[serde(default)]
    pub dec_hidden: Vec<usize>,
    pub beta: f64,
    pub alpha: f64,
    #[serde(default = "one_f")]
    pub kappa: f64,
    #[serde(default = "ReconTargetSpec::current")]
    pub target: ReconTargetSpec,
    pub vocab: usize,
    #[serde(default)]
    pub supervision: Supervision,
    /// Divide the supervised term by the number of steps.
    #[serde(default)]
    pub normalize_supervised: bool,
}

fn two() -> usize {
    2
}

fn one_f() -> f64 {
    1.0
}

impl RecRepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_layers == 0 {
            return Err(Error::Config("at least one shared recurrent layer is required".into()));
        }
        if !self.pyramid.is_empty() && self.pyramid.len() != self.shared_layers {
            return Err(Error::Config(format!(
                "{} pyramid flags given for {} shared layers",
                self.pyramid.len(),
                self.shared_layers
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if self.input_dim == 0 || self.hidden == 0 || self.latent == 0 || self.vocab == 0 {
            return Err(Error::Config("model widths and vocabulary must be positive".into()));
        }
        if self.aux == AuxMode::Hierarchical && self.aux_dim == 0 {
            return Err(Error::Config("hierarchical auxiliary latent needs aux_dim >= 1".into()));
        }
        self.target.validate()
    }

    fn pyramid_flags(&self) -> Vec<bool> {
        if self.pyramid.is_empty() {
            vec![false; self.shared_layers]
        } else {
            self.pyramid.clone()
        }
    }
}

/// Concatenates each run of `s` consecutive frames; a partial tail run is
/// dropped.
pub fn group_frames(frames: &Tensor, s: usize) -> Result<Tensor> {
    let (t, d) = (frames.rows(), frames.cols());
    if s == 0 || t < s {
        return Err(Error::Shape(format!("cannot group {t} frames in runs of {s}")));
    }
    let n = t / s;
    Ok(Tensor::from_vec(n, s * d, frames.data()[..n * s * d].to_vec()))
}

/// Posterior parameters of every step.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub logvar: Var,
    pub h: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecRep {
    pub cfg: RecRepConfig,
    enc: RecurrentStack,
    zhead: GaussianHead,
    rhead: Option<GaussianHead>,
    dec: Mlp,
    sup: Option<RecurrentStack>,
    out: Linear,
}

impl RecRep {
    pub fn new(cfg: RecRepConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = RecurrentStack::new("rr.enc", cfg.input_dim, cfg.hidden, cfg.shared_layers, true)
            .with_pyramid(cfg.pyramid_flags());
        let hd = enc.dout();
        let zhead = GaussianHead::deep("rr.z", hd, cfg.latent);
        let (rhead, dec_in) = match cfg.aux {
            AuxMode::None => (None, cfg.latent),
            AuxMode::Flat => (
                (cfg.aux_dim > 0).then(|| GaussianHead::deep("rr.r", hd, cfg.aux_dim)),
                cfg.latent + cfg.aux_dim,
            ),
            AuxMode::Hierarchical => (
                Some(GaussianHead::deep("rr.r", hd + cfg.latent, cfg.aux_dim)),
                cfg.aux_dim,
            ),
        };
        let tdim = cfg.target.dim(cfg.input_dim * enc.stride());
        let mut dims = vec![dec_in];
        dims.extend(&cfg.dec_hidden);
        dims.push(tdim);
        let dec = Mlp::new("rr.dec", &dims, Activation::Relu, Activation::Identity);
        let sup = (cfg.private_layers > 0)
            .then(|| RecurrentStack::new("rr.sup", cfg.latent, cfg.hidden, cfg.private_layers, true));
        let head_in = sup.as_ref().map_or(cfg.latent, |s| s.dout());
        let classes = match cfg.supervision {
            Supervision::Framewise => cfg.vocab,
            Supervision::Ctc => cfg.vocab + 1,
        };
        Ok(RecRep {
            out: Linear::new("rr.out", head_in, classes),
            cfg,
            enc,
            zhead,
            rhead,
            dec,
            sup,
        })
    }

    pub fn stride(&self) -> usize {
        self.enc.stride()
    }

    /// Number of latent steps for an utterance of `t` frames.
    pub fn steps(&self, t: usize) -> usize {
        t / self.stride()
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.enc.init(&mut p, &mut rng);
        self.zhead.init(&mut p, &mut rng);
        if let Some(r) = &self.rhead {
            r.init(&mut p, &mut rng);
        }
        self.dec.init(&mut p, &mut rng);
        if let Some(s) = &self.sup {
            s.init(&mut p, &mut rng);
        }
        self.out.init(&mut p, &mut rng);
        p
    }

    pub fn posterior(&self, ctx: &mut Ctx, frames: &Tensor) -> Result<Posterior> {
        if frames.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "recurrent model input",
                expected: self.cfg.input_dim,
                got: frames.cols(),
            });
        }
        if frames.rows() < self.stride() {
            return Err(Error::Shape(format!(
                "{} frames is shorter than the encoder stride {}",
                frames.rows(),
                self.stride()
            )));
        }
        let x = ctx.input(frames.clone());
        let h = self.enc.forward(ctx, x);
        let (mu, logvar) = self.zhead.forward(ctx, h);
        Ok(Posterior { mu, logvar, h })
    }

    /// Negative ELBO averaged over steps, given a posterior. `prior` covers
    /// `z` only; an auxiliary latent always uses the standard normal.
    pub fn neg_elbo(&self, ctx: &mut Ctx, frames: &Tensor, post: &Posterior, prior: Option<&PriorRows>) -> Result<Var> {
        let grouped = group_frames(frames, self.stride())?;
        let targets = build_recon_targets(&grouped, &self.cfg.target, &mut ctx.rng)?;
        let k = if ctx.train { 1.0 } else { 0.0 };
        let z = reparameterize(ctx, post.mu, post.logvar, k);
        let beta = self.cfg.beta;
        let kl_z = kl_rows(&mut ctx.g, post.mu, post.logvar, prior);
        let mut kl = ctx.g.scale(kl_z, beta);
        let dec_in = match (&self.rhead, self.cfg.aux) {
            (Some(rh), mode) => {
                let rin = if mode == AuxMode::Hierarchical {
                    ctx.g.concat_cols(&[post.h, z])
                } else {
                    post.h
                };
                let (rm, rl) = rh.forward(ctx, rin);
                let r = reparameterize(ctx, rm, rl, k);
                let kl_r = kl_rows(&mut ctx.g, rm, rl, None);
                let kl_r = ctx.g.scale(kl_r, beta);
                kl = ctx.g.add(kl, kl_r);
                if mode == AuxMode::Hierarchical {
                    r
                } else {
                    ctx.g.concat_cols(&[z, r])
                }
            }
            (None, _) => z,
        };
        let recon = self.dec.forward(ctx, dec_in);
        let tv = ctx.input(targets);
        let rows = half_sq_err_rows(&mut ctx.g, tv, recon);
        let rows = ctx.g.add(rows, kl);
        Ok(ctx.g.mean(rows))
    }

    /// `-ELBO(x)` on its own.
    pub fn elbo_loss(&self, ctx: &mut Ctx, u: &Utterance, prior: Option<&PriorRows>) -> Result<Var> {
        let post = self.posterior(ctx, &u.frames)?;
        self.neg_elbo(ctx, &u.frames, &post, prior)
    }

    /// Logits of the supervised head on the discriminative sample.
    pub fn logits(&self, ctx: &mut Ctx, post: &Posterior) -> Var {
        let k = if ctx.train { self.cfg.kappa } else { 0.0 };
        let mut z = reparameterize(ctx, post.mu, post.logvar, k);
        if let Some(s) = &self.sup {
            z = s.forward(ctx, z);
        }
        self.out.forward(ctx, z)
    }

    /// Frame labels at latent resolution: step `k` takes the label of the
    /// last frame it covers.
    pub fn step_labels(&self, labels: &[usize]) -> Vec<usize> {
        let s = self.stride();
        (0..labels.len() / s).map(|k| labels[k * s + s - 1]).collect()
    }

    pub fn supervised_loss(&self, ctx: &mut Ctx, u: &Utterance, post: &Posterior) -> Result<Var> {
        let logits = self.logits(ctx, post);
        let lp = ctx.g.log_softmax(logits);
        let steps = ctx.g.shape(lp)[0];
        let nll = match self.cfg.supervision {
            Supervision::Framewise => {
                let labels = u
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("utterance `{}` has no frame labels", u.id)))?;
                let at: Vec<(usize, usize)> = self.step_labels(labels).into_iter().enumerate().collect();
                if let Some(&(_, l)) = at.iter().find(|(_, l)| *l >= self.cfg.vocab) {
                    return Err(Error::Format(format!("label {l} outside vocabulary of {}", self.cfg.vocab)));
                }
                let picked = ctx.g.gather(lp, &at);
                let s = ctx.g.sum(picked);
                ctx.g.neg(s)
            }
            Supervision::Ctc => {
                let tr = u
                    .transcript
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("utterance `{}` has no transcript", u.id)))?;
                ctc_loss_node(&mut ctx.g, lp, tr)?
            }
        };
        Ok(if self.cfg.normalize_supervised {
            ctx.g.scale(nll, 1.0 / steps as f64)
        } else {
            nll
        })
    }

    /// `(1 - alpha) * supervised + alpha * (-ELBO)`.
    pub fn joint_loss(&self, ctx: &mut Ctx, u: &Utterance, prior: Option<&PriorRows>) -> Result<Var> {
        let post = self.posterior(ctx, &u.frames)?;
        let elbo = self.neg_elbo(ctx, &u.frames, &post, prior)?;
        let a = self.cfg.alpha;
        if a == 1.0 {
            return Ok(elbo);
        }
        let sup = self.supervised_loss(ctx, u, &post)?;
        Ok(weighted_sum(&mut ctx.g, sup, 1.0 - a, elbo, a))
    }

    fn prior_for(&self, store: Option<&PriorStore>, u: &Utterance) -> Result<Option<PriorRows>> {
        store.map(|s| s.utterance(&u.id, self.steps(u.len()))).transpose()
    }

    /// Mean joint loss over a batch, reading priors from `store` if given.
    pub fn batch_loss(&self, ctx: &mut Ctx, utts: &[&Utterance], store: Option<&PriorStore>) -> Result<Var> {
        if utts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let terms = utts
            .iter()
            .map(|u| {
                let p = self.prior_for(store, u)?;
                self.joint_loss(ctx, u, p.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_of(&mut ctx.g, &terms))
    }

    /// `(1 - alpha) * mean supervised(labeled) + alpha * mean(-ELBO)` where
    /// the ELBO average runs over labeled and unlabeled utterances alike.
    pub fn semi_supervised_loss(
        &self,
        ctx: &mut Ctx,
        labeled: &[&Utterance],
        unlabeled: &[&Utterance],
        store: Option<&PriorStore>,
    ) -> Result<Var> {
        if labeled.is_empty() {
            return Err(Error::Config("semi-supervised batch has no labeled utterances".into()));
        }
        let a = self.cfg.alpha;
        let mut sups = Vec::with_capacity(labeled.len());
        let mut elbos = Vec::with_capacity(labeled.len() + unlabeled.len());
        for u in labeled {
            let p = self.prior_for(store, u)?;
            let post = self.posterior(ctx, &u.frames)?;
            elbos.push(self.neg_elbo(ctx, &u.frames, &post, p.as_ref())?);
            if a < 1.0 {
                sups.push(self.supervised_loss(ctx, u, &post)?);
            }
        }
        for u in unlabeled {
            let p = self.prior_for(store, u)?;
            elbos.push(self.elbo_loss(ctx, u, p.as_ref())?);
        }
        let elbo = mean_of(&mut ctx.g, &elbos);
        if sups.is_empty() {
            return Ok(elbo);
        }
        let sup = mean_of(&mut ctx.g, &sups);
        Ok(weighted_sum(&mut ctx.g, sup, 1.0 - a, elbo, a))
    }

    /// Posterior means and log-variances of `z` in evaluation mode.
    pub fn posterior_values(&self, params: &Params, frames: &Tensor) -> Result<PriorRows> {
        let mut ctx = Ctx::new(params, 0, false);
        let post = self.posterior(&mut ctx, frames)?;
        Ok(PriorRows {
            mu: ctx.value(post.mu).clone(),
            logvar: ctx.value(post.logvar).clone(),
        })
    }

    /// Posterior means, one row per step.
    pub fn features(&self, params: &Params, frames: &Tensor) -> Result<Tensor> {
        Ok(self.posterior_values(params, frames)?.mu)
    }

    /// Freezes the current posteriors of every utterance under `tag`.
    pub fn snapshot_priors(&self, params: &Params, utts: &[&Utterance], tag: u64) -> Result<PriorStore> {
        let mut store = PriorStore::new(tag, self.cfg.latent);
        for u in utts {
            let p = self.posterior_values(params, &u.frames)?;
            store.insert_rows(&u.id, &p.mu, &p.logvar)?;
        }
        Ok(store)
    }

    /// Mean `KL(q(z_t | h_t) || N(0, I))` over all steps of all utterances.
    pub fn mean_kl_to_standard(&self, params: &Params, utts: &[&Utterance]) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for u in utts {
            let p = self.posterior_values(params, &u.frames)?;
            for t in 0..p.rows() {
                let q = DiagGaussian::new(p.mu.row_slice(t).to_vec(), p.logvar.row_slice(t).to_vec())?;
                total += crate::distributions::kl_to_standard(&q);
                n += 1;
            }
        }
        Ok(total / n.max(1) as f64)
    }

    /// Per-step supervised negative log-likelihood in evaluation mode,
    /// averaged over all steps (framewise) or utterances (CTC).
    pub fn eval_supervised(&self, params: &Params, utts: &[&Utterance]) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for u in utts {
            let mut ctx = Ctx::new(params, 0, false);
            let post = self.posterior(&mut ctx, &u.frames)?;
            let logits = self.logits(&mut ctx, &post);
            let lp = crate::graph::log_softmax_rows(ctx.value(logits));
            match self.cfg.supervision {
                Supervision::Framewise => {
                    let labels = u
                        .labels
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("utterance `{}` has no frame labels", u.id)))?;
                    for (k, l) in self.step_labels(labels).into_iter().enumerate() {
                        total -= lp.get(k, l);
                        n += 1;
                    }
                }
                Supervision::Ctc => {
                    let tr = u
                        .transcript
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("utterance `{}` has no transcript", u.id)))?;
                    total += crate::ctc::ctc_nll(&lp, tr)?.0;
                    n += 1;
                }
            }
        }
        Ok(total / n.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Forward predictive latent, decoded into the next frame.
    #[serde(default)]
    pub d_f: usize,
    /// Backward predictive latent, decoded into the previous frame.
    #[serde(default)]
    pub d_b: usize,
    /// Forward reconstructive latent.
    #[serde(default)]
    pub d_zf: usize,
    /// Backward reconstructive latent.
    #[serde(default)]
    pub d_zb: usize,
    #[serde(default)]
    pub dec_hidden: Vec<usize>,
    pub beta: f64,
    /// Framewise classes of the multitask head; 0 disables it.
    #[serde(default)]
    pub vocab: usize,
    #[serde(default = "one_f")]
    pub alpha: f64,
}

impl FbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f + self.d_b + self.d_zf + self.d_zb == 0 {
            return Err(Error::Config("forward-backward model needs at least one latent".into()));
        }
        if self.d_zf > 0 && self.d_zb > 0 && self.d_zf != self.d_zb {
            return Err(Error::Config(
                "forward and backward reconstructive latents must share a width to be averaged".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.alpha < 1.0 && self.vocab == 0 {
            return Err(Error::Config("alpha below 1 needs a multitask head (vocab >= 1)".into()));
        }
        if self.input_dim == 0 || self.hidden == 0 || !(self.beta >= 0.0) {
            return Err(Error::Config("invalid widths or beta".into()));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        self.d_f + self.d_zf.max(self.d_zb) + self.d_b
    }
}

#[derive(Clone, Debug, PartialEq)]
struct FbTerm {
    head: GaussianHead,
    dec: Mlp,
}

/// A causal and an anti-causal recurrent encoder. Forward states predict the
/// next frame and reconstruct the current one; backward states predict the
/// previous frame and reconstruct the current one.
#[derive(Clone, Debug, PartialEq)]
pub struct FbModel {
    pub cfg: FbConfig,
    fwd: RecurrentStack,
    bwd: RecurrentStack,
    f: Option<FbTerm>,
    zf: Option<FbTerm>,
    b: Option<FbTerm>,
    zb: Option<FbTerm>,
    out: Option<Linear>,
}

impl FbModel {
    pub fn new(cfg: FbConfig) -> Result<Self> {
        cfg.validate()?;
        let term = |name: &str, d: usize| {
            (d > 0).then(|| {
                let mut dims = vec![d];
                dims.extend(&cfg.dec_hidden);
                dims.push(cfg.input_dim);
                FbTerm {
                    head: GaussianHead::deep(&format!("fb.{name}"), cfg.hidden, d),
                    dec: Mlp::new(&format!("fb.dec{name}"), &dims, Activation::Relu, Activation::Identity),
                }
            })
        };
        Ok(FbModel {
            fwd: RecurrentStack::new("fb.fwd", cfg.input_dim, cfg.hidden, 1, false),
            bwd: RecurrentStack::new("fb.bwd", cfg.input_dim, cfg.hidden, 1, false),
            f: term("f", cfg.d_f),
            zf: term("zf", cfg.d_zf),
            b: term("b", cfg.d_b),
            zb: term("zb", cfg.d_zb),
            out: (cfg.vocab > 0).then(|| Linear::new("fb.out", cfg.feature_dim(), cfg.vocab)),
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.fwd.init(&mut p, &mut rng);
        self.bwd.init(&mut p, &mut rng);
        for t in [&self.f, &self.zf, &self.b, &self.zb].into_iter().flatten() {
            t.head.init(&mut p, &mut rng);
            t.dec.init(&mut p, &mut rng);
        }
        if let Some(o) = &self.out {
            o.init(&mut p, &mut rng);
        }
        p
    }

    fn states(&self, ctx: &mut Ctx, frames: &Tensor) -> Result<(Var, Var, Var)> {
        if frames.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "forward-backward input",
                expected: self.cfg.input_dim,
                got: frames.cols(),
            });
        }
        let x = ctx.input(frames.clone());
        let h = self.fwd.forward(ctx, x);
        // The backward encoder is a causal stack run on the reversed input.
        let t = frames.rows();
        let rev: Vec<usize> = (0..t).rev().collect();
        let xr = ctx.g.gather_rows(x, &rev);
        let gr = self.bwd.forward(ctx, xr);
        let g = ctx.g.gather_rows(gr, &rev);
        Ok((x, h, g))
    }

    /// One term: mean over `rows` of recon of `target_rows` plus beta KL.
    /// Returns the loss and the full-length posterior mean.
    fn term(
        &self,
        ctx: &mut Ctx,
        t: &FbTerm,
        states: Var,
        x: Var,
        rows: &[usize],
        targets: &[usize],
    ) -> (Option<Var>, Var, Var) {
        let (mu, lv) = t.head.forward(ctx, states);
        if rows.is_empty() {
            return (None, mu, lv);
        }
        let k = if ctx.train { 1.0 } else { 0.0 };
        let m = ctx.g.gather_rows(mu, rows);
        let l = ctx.g.gather_rows(lv, rows);
        let z = reparameterize(ctx, m, l, k);
        let pred = t.dec.forward(ctx, z);
        let tgt = ctx.g.gather_rows(x, targets);
        let r = half_sq_err_rows(&mut ctx.g, tgt, pred);
        let kl = kl_rows(&mut ctx.g, m, l, None);
        let kl = ctx.g.scale(kl, self.cfg.beta);
        let s = ctx.g.add(r, kl);
        (Some(ctx.g.mean(s)), mu, lv)
    }

    /// Sum of the enabled per-term losses and the multitask features
    /// `[f ; (zf + zb) / 2 ; b]` built from posterior samples.
    fn unsupervised(&self, ctx: &mut Ctx, frames: &Tensor) -> Result<(Var, Var)> {
        let (x, h, g) = self.states(ctx, frames)?;
        let t = frames.rows();
        let all: Vec<usize> = (0..t).collect();
        let head: Vec<usize> = (0..t - 1).collect();
        let tail: Vec<usize> = (1..t).collect();
        let mut losses = Vec::new();
        let mut feats = Vec::new();
        let mut push = |ctx: &mut Ctx, term: &Option<FbTerm>, s: Var, rows: &[usize], tg: &[usize]| {
            term.as_ref().map(|tm| {
                let (l, mu, _) = self.term(ctx, tm, s, x, rows, tg);
                losses.extend(l);
                mu
            })
        };
        let f = push(ctx, &self.f, h, &head, &tail);
        let zf = push(ctx, &self.zf, h, &all, &all);
        let zb = push(ctx, &self.zb, g, &all, &all);
        let b = push(ctx, &self.b, g, &tail, &head);
        feats.extend(f);
        match (zf, zb) {
            (Some(a), Some(c)) => {
                let s = ctx.g.add(a, c);
                feats.push(ctx.g.scale(s, 0.5));
            }
            (a, c) => feats.extend(a.or(c)),
        }
        feats.extend(b);
        let loss = if losses.is_empty() {
            ctx.g.constant(Tensor::scalar(0.0))
        } else {
            let mut acc = losses[0];
            for &l in &losses[1..] {
                acc = ctx.g.add(acc, l);
            }
            acc
        };
        let feats = ctx.g.concat_cols(&feats);
        Ok((loss, feats))
    }

    pub fn loss(&self, ctx: &mut Ctx, u: &Utterance) -> Result<Var> {
        let (unsup, feats) = self.unsupervised(ctx, &u.frames)?;
        let a = self.cfg.alpha;
        let Some(out) = self.out.as_ref().filter(|_| a < 1.0) else {
            return Ok(unsup);
        };
        let labels = u
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("utterance `{}` has no frame labels", u.id)))?;
        let logits = out.forward(ctx, feats);
        let lp = ctx.g.log_softmax(logits);
        let at: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        let picked = ctx.g.gather(lp, &at);
        let s = ctx.g.sum(picked);
        let sup = ctx.g.neg(s);
        Ok(weighted_sum(&mut ctx.g, sup, 1.0 - a, unsup, a))
    }

    /// Posterior-mean features `[f ; (zf + zb) / 2 ; b]`, one row per frame.
    pub fn features(&self, params: &Params, frames: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(params, 0, false);
        let (_, feats) = self.unsupervised(&mut ctx, frames)?;
        Ok(ctx.value(feats).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RecRepConfig {
        RecRepConfig {
            input_dim: 3,
            hidden: 4,
            shared_layers: 1,
            private_layers: 0,
            pyramid: vec![],
            latent: 2,
            aux: AuxMode::None,
            aux_dim: 0,
            dec_hidden: vec![],
            beta: 1.0,
            alpha: 0.5,
            kappa: 1.0,
            target: ReconTargetSpec::current(),
            vocab: 2,
            supervision: Supervision::Framewise,
            normalize_supervised: false,
        }
    }

    #[test]
    fn schedule_fires_on_cadence() {
        let s = PriorSchedule {
            start_epoch: 3,
            every: 2,
            on_best: false,
        };
        let fired: Vec<usize> = (1..=9).filter(|&e| s.fires(e, false)).collect();
        assert_eq!(fired, vec![3, 5, 7, 9]);
        let b = PriorSchedule { on_best: true, ..s };
        assert!(!b.fires(2, true) && b.fires(4, true) && !b.fires(4, false));
    }

    #[test]
    fn group_frames_drops_tail() {
        let x = Tensor::from_vec(5, 1, vec![1., 2., 3., 4., 5.]);
        let g = group_frames(&x, 2).unwrap();
        assert_eq!(g.shape(), [2, 2]);
        assert_eq!(g.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn rejects_bad_alpha_and_layers() {
        assert!(RecRep::new(RecRepConfig { alpha: 1.5, ..cfg() }).is_err());
        assert!(RecRep::new(RecRepConfig { shared_layers: 0, ..cfg() }).is_err());
        assert!(RecRep::new(RecRepConfig {
            pyramid: vec![true, false],
            ..cfg()
        })
        .is_err());
    }

    #[test]
    fn fb_requires_a_latent() {
        let c = FbConfig {
            input_dim: 2,
            hidden: 3,
            d_f: 0,
            d_b: 0,
            d_zf: 0,
            d_zb: 0,
            dec_hidden: vec![],
            beta: 1.0,
            vocab: 0,
            alpha: 1.0,
        };
        assert!(FbModel::new(c).is_err());
    }
}
