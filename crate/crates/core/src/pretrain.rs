//! Objectives that learn by predicting unseen content: contrastive
//! predictive coding, masked reconstruction and its contrastive and
//! multi-view variants, plus the helpers that carry a pretrained encoder
//! into a recogniser.
//!
//! Every masked objective encodes `X * M` with the bidirectional stack
//! `enc`, the same names a [`Recognizer`] uses, so a pretrained checkpoint
//! initialises a recogniser directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{derangement, gen_mask_with, MaskMatrix, MaskSpec, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{mean_of, weighted_sum, Activation, Ctx, Linear, Mlp, Params, RecurrentStack};
use crate::recognizer::Recognizer;
use crate::tensor::Tensor;

/// Per-row InfoNCE, `-log(exp(s+) / (exp(s+) + sum exp(s-)))`, as an
/// `n x 1` column. `neg` is `n x N`.
pub fn infonce_rows(g: &mut Graph, pos: Var, neg: Var) -> Var {
    let all = g.concat_cols(&[pos, neg]);
    let lse = g.logsumexp(all);
    g.sub(lse, pos)
}

/// Mean InfoNCE over rows.
pub fn infonce(g: &mut Graph, pos: Var, neg: Var) -> Var {
    let r = infonce_rows(g, pos, neg);
    g.mean(r)
}

/// Row-wise dot products, `n x 1`.
fn dots(g: &mut Graph, a: Var, b: Var) -> Var {
    let p = g.mul(a, b);
    g.sum_cols(p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Other steps of the same utterance.
    #[default]
    Within,
    /// Any step of any utterance in the batch.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpcConfig {
    pub input_dim: usize,
    /// Future steps predicted from each context.
    pub k: usize,
    /// Negatives per prediction.
    pub negatives: usize,
    /// Hidden widths of the latent network; its output width is `latent`.
    #[serde(default)]
    pub latent_hidden: Vec<usize>,
    pub latent: usize,
    pub context_hidden: usize,
    #[serde(default = "one")]
    pub context_layers: usize,
    #[serde(default)]
    pub negative_mode: NegativeMode,
}

fn one() -> usize {
    1
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("CPC needs at least one future step (k >= 1)".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("CPC needs at least one negative".into()));
        }
        if self.input_dim == 0 || self.latent == 0 || self.context_hidden == 0 || self.context_layers == 0 {
            return Err(Error::Config("CPC widths must be positive".into()));
        }
        Ok(())
    }
}

/// Feed-forward latent network `cpc.z`, causal recurrent context network
/// `cpc.ctx` and one bilinear map `cpc.w{k}` per future step.
#[derive(Clone, Debug, PartialEq)]
pub struct Cpc {
    pub cfg: CpcConfig,
    znet: Mlp,
    cnet: RecurrentStack,
}

impl Cpc {
    pub fn new(cfg: CpcConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.latent_hidden);
        dims.push(cfg.latent);
        Ok(Cpc {
            znet: Mlp::new("cpc.z", &dims, Activation::Relu, Activation::Identity),
            cnet: RecurrentStack::new("cpc.ctx", cfg.latent, cfg.context_hidden, cfg.context_layers, false),
            cfg,
        })
    }

    fn bilinear(&self, k: usize) -> Linear {
        Linear::new(format!("cpc.w{k}"), self.cfg.context_hidden, self.cfg.latent)
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.znet.init(&mut p, &mut rng);
        self.cnet.init(&mut p, &mut rng);
        for k in 1..=self.cfg.k {
            self.bilinear(k).init(&mut p, &mut rng);
        }
        p
    }

    fn latents_and_contexts(&self, ctx: &mut Ctx, frames: &Tensor) -> Result<(Var, Var)> {
        if frames.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "CPC input",
                expected: self.cfg.input_dim,
                got: frames.cols(),
            });
        }
        let x = ctx.input(frames.clone());
        let z = self.znet.forward(ctx, x);
        let c = self.cnet.forward(ctx, z);
        Ok((z, c))
    }

    /// Mean InfoNCE over every `(utterance, t, k)` with `t + k` inside the
    /// utterance. Scores are `z_{t+k}^T W_k c_t`.
    pub fn loss(&self, ctx: &mut Ctx, utts: &[&Utterance]) -> Result<Var> {
        if utts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(u) = utts.iter().find(|u| u.len() <= self.cfg.k) {
            return Err(Error::Config(format!(
                "utterance `{}` has {} frames; CPC with k = {} needs more",
                u.id,
                u.len(),
                self.cfg.k
            )));
        }
        let mut zs = Vec::with_capacity(utts.len());
        let mut cs = Vec::with_capacity(utts.len());
        for u in utts {
            let (z, c) = self.latents_and_contexts(ctx, &u.frames)?;
            zs.push(z);
            cs.push(c);
        }
        let pool = ctx.g.concat_rows(&zs);
        let offsets: Vec<usize> = utts
            .iter()
            .scan(0, |acc, u| {
                let o = *acc;
                *acc += u.len();
                Some(o)
            })
            .collect();
        let total: usize = utts.iter().map(|u| u.len()).sum();
        let mut terms = Vec::new();
        let mut weights = Vec::new();
        for (i, u) in utts.iter().enumerate() {
            let t_len = u.len();
            for k in 1..=self.cfg.k {
                let n = t_len - k;
                let cr: Vec<usize> = (0..n).collect();
                let c = ctx.g.gather_rows(cs[i], &cr);
                let pred = self.bilinear(k).forward_nobias(ctx, c);
                let zr: Vec<usize> = (k..t_len).collect();
                let zp = ctx.g.gather_rows(zs[i], &zr);
                let pos = dots(&mut ctx.g, pred, zp);
                let mut negs = Vec::with_capacity(self.cfg.negatives);
                for _ in 0..self.cfg.negatives {
                    let idx: Vec<usize> = (0..n)
                        .map(|t| {
                            let own = offsets[i] + t + k;
                            match self.cfg.negative_mode {
                                NegativeMode::Within => offsets[i] + sample_except(&mut ctx.rng, t_len, t + k),
                                NegativeMode::Batch => sample_except(&mut ctx.rng, total, own),
                            }
                        })
                        .collect();
                    let zn = ctx.g.gather_rows(pool, &idx);
                    negs.push(dots(&mut ctx.g, pred, zn));
                }
                let neg = ctx.g.concat_cols(&negs);
                let r = infonce_rows(&mut ctx.g, pos, neg);
                terms.push(ctx.g.sum(r));
                weights.push(n);
            }
        }
        let count: usize = weights.iter().sum();
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = ctx.g.add(acc, t);
        }
        Ok(ctx.g.scale(acc, 1.0 / count as f64))
    }

    /// Context vectors in evaluation mode, one row per frame.
    pub fn features(&self, params: &Params, frames: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(params, 0, false);
        let (_, c) = self.latents_and_contexts(&mut ctx, frames)?;
        Ok(ctx.value(c).clone())
    }
}

trait NoBias {
    fn forward_nobias(&self, ctx: &mut Ctx, x: Var) -> Var;
}

impl NoBias for Linear {
    /// `x W` without the bias, for bilinear scores.
    fn forward_nobias(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(&format!("{}.w", self.name));
        ctx.g.matmul(x, w)
    }
}

/// Uniform over `0..n` except `skip`. Requires `n >= 2`.
fn sample_except<R: Rng + ?Sized>(rng: &mut R, n: usize, skip: usize) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= skip {
        j + 1
    } else {
        j
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedObjective {
    Bert,
    BertHalf,
    Bicpc,
    BicpcHalf,
    MvMae,
    MvContrast,
    CrossviewBert,
}

impl MaskedObjective {
    pub fn is_multiview(self) -> bool {
        matches!(
            self,
            MaskedObjective::MvMae | MaskedObjective::MvContrast | MaskedObjective::CrossviewBert
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedPretrainConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    #[serde(default)]
    pub dec_hidden: Vec<usize>,
    pub objective: MaskedObjective,
    #[serde(default)]
    pub mask: MaskSpec,
    /// Weight of the reconstruction terms in the multi-view objectives.
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub negatives: usize,
}

fn half() -> f64 {
    0.5
}

impl MaskedPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("masked pretraining widths and depth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.mask.masks_anything() {
            return Err(Error::Config(
                "masked pretraining needs at least one time or channel mask of positive width".into(),
            ));
        }
        if self.negatives == 0 {
            return Err(Error::Config("at least one negative is required".into()));
        }
        Ok(())
    }
}

/// Output of a masked objective. `degenerate` is set when a mask hides
/// nothing, so the prediction targets carry no information.
#[derive(Clone, Copy, Debug)]
pub struct MaskedOutput {
    pub loss: Var,
    pub degenerate: bool,
}

/// Context encoder `enc`, reconstruction decoder `dec`, a latent network
/// `bicpc.z` for BiCPC and a one-layer recurrent latent encoder `mv.z` for
/// cross-view prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModel {
    pub cfg: MaskedPretrainConfig,
    pub enc: RecurrentStack,
    dec: Mlp,
    znet: Mlp,
    zrec: RecurrentStack,
}

impl MaskedModel {
    /// Builds the model without validating the mask specification, for
    /// callers that supply masks themselves.
    pub fn with_unchecked_mask(cfg: MaskedPretrainConfig) -> Result<Self> {
        let mut c = cfg.clone();
        c.mask = MaskSpec::default();
        c.validate()?;
        let enc = RecurrentStack::new("enc", cfg.input_dim, cfg.hidden, cfg.layers, true);
        let dout = enc.dout();
        let mut dims = vec![dout];
        dims.extend(&cfg.dec_hidden);
        dims.push(cfg.input_dim);
        let mut zdims = vec![cfg.input_dim];
        zdims.extend(&cfg.dec_hidden);
        zdims.push(dout);
        Ok(MaskedModel {
            dec: Mlp::new("dec", &dims, Activation::Relu, Activation::Identity),
            znet: Mlp::new("bicpc.z", &zdims, Activation::Relu, Activation::Identity),
            zrec: RecurrentStack::new("mv.z", cfg.input_dim, cfg.hidden, 1, true),
            enc,
            cfg,
        })
    }

    pub fn new(cfg: MaskedPretrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_unchecked_mask(cfg)
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.enc.init(&mut p, &mut rng);
        match self.cfg.objective {
            MaskedObjective::Bicpc | MaskedObjective::BicpcHalf => self.znet.init(&mut p, &mut rng),
            MaskedObjective::CrossviewBert => {
                self.dec.init(&mut p, &mut rng);
                self.zrec.init(&mut p, &mut rng);
            }
            _ => self.dec.init(&mut p, &mut rng),
        }
        p
    }

    fn check(&self, x: &Tensor, m: &MaskMatrix) -> Result<()> {
        if x.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "masked model input",
                expected: self.cfg.input_dim,
                got: x.cols(),
            });
        }
        if m.observed.shape() != x.shape() || m.central.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match input {:?}",
                m.observed.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn context(&self, ctx: &mut Ctx, x: &Tensor, m: &MaskMatrix) -> Var {
        let xm = ctx.input(x.hadamard(&m.observed));
        self.enc.forward(ctx, xm)
    }

    /// `||W * (X - g(f(M * X)))||_F^2` with `W` the masked cells (full) or
    /// their central part (half).
    pub fn masked_recon_loss(&self, ctx: &mut Ctx, x: &Tensor, m: &MaskMatrix, half: bool) -> Result<Var> {
        self.check(x, m)?;
        let c = self.context(ctx, x, m);
        Ok(self.recon_from_context(ctx, x, m, c, half))
    }

    fn recon_from_context(&self, ctx: &mut Ctx, x: &Tensor, m: &MaskMatrix, c: Var, half: bool) -> Var {
        let pred = self.dec.forward(ctx, c);
        let xv = ctx.input(x.clone());
        let d = ctx.g.sub(xv, pred);
        let w = if half { m.central.clone() } else { m.masked() };
        let d = ctx.g.mul_const(d, w);
        let s = ctx.g.square(d);
        ctx.g.sum(s)
    }

    /// Sum over steps of InfoNCE between the context `c_t` and the latent of
    /// the hidden content `z+_t`, against latents of row-shuffled copies.
    pub fn bicpc_loss(&self, ctx: &mut Ctx, x: &Tensor, m: &MaskMatrix, half: bool) -> Result<MaskedOutput> {
        self.check(x, m)?;
        let hidden = x.hadamard(&if half { m.central.clone() } else { m.masked() });
        let c = self.context(ctx, x, m);
        let hv = ctx.input(hidden.clone());
        let zpos = self.znet.forward(ctx, hv);
        let pos = dots(&mut ctx.g, c, zpos);
        let t = x.rows();
        let mut negs = Vec::with_capacity(self.cfg.negatives);
        for _ in 0..self.cfg.negatives {
            let perm = derangement(t, &mut ctx.rng);
            let sv = ctx.input(hidden.gather_rows(&perm));
            let zn = self.znet.forward(ctx, sv);
            negs.push(dots(&mut ctx.g, c, zn));
        }
        let neg = ctx.g.concat_cols(&negs);
        let r = infonce_rows(&mut ctx.g, pos, neg);
        Ok(MaskedOutput {
            loss: ctx.g.sum(r),
            degenerate: m.masked_count() == 0,
        })
    }

    /// `alpha (L_recon1 + L_recon2) + (1 - alpha) L_consistency`.
    pub fn multiview_loss(&self, ctx: &mut Ctx, x: &Tensor, m1: &MaskMatrix, m2: &MaskMatrix) -> Result<Var> {
        self.check(x, m1)?;
        self.check(x, m2)?;
        let a = self.cfg.alpha;
        let c1 = self.context(ctx, x, m1);
        let c2 = self.context(ctx, x, m2);
        let r1 = self.recon_from_context(ctx, x, m1, c1, false);
        let r2 = self.recon_from_context(ctx, x, m2, c2, false);
        let recon = ctx.g.add(r1, r2);
        let t = x.rows();
        let cons = match self.cfg.objective {
            MaskedObjective::MvMae => {
                let d = ctx.g.sub(c1, c2);
                let d = ctx.g.abs(d);
                ctx.g.mean(d)
            }
            MaskedObjective::MvContrast => {
                let idx = self.negative_steps(ctx, t)?;
                let l12 = contrast_direction(&mut ctx.g, c1, c2, &idx);
                let l21 = contrast_direction(&mut ctx.g, c2, c1, &idx);
                ctx.g.add(l12, l21)
            }
            MaskedObjective::CrossviewBert => {
                let h1 = ctx.input(x.hadamard(&m1.masked()));
                let h2 = ctx.input(x.hadamard(&m2.masked()));
                let z1 = self.zrec.forward(ctx, h1);
                let z2 = self.zrec.forward(ctx, h2);
                let s1: Vec<Vec<usize>> = (0..self.cfg.negatives).map(|_| derangement(t, &mut ctx.rng)).collect();
                let s2: Vec<Vec<usize>> = (0..self.cfg.negatives).map(|_| derangement(t, &mut ctx.rng)).collect();
                let l1 = predict_direction(&mut ctx.g, c1, z2, &s2);
                let l2 = predict_direction(&mut ctx.g, c2, z1, &s1);
                ctx.g.add(l1, l2)
            }
            other => {
                return Err(Error::Config(format!("{other:?} is not a multi-view objective")));
            }
        };
        Ok(weighted_sum(&mut ctx.g, recon, a, cons, 1.0 - a))
    }

    /// For each negative slot, a step index `j != t` for every step `t`.
    fn negative_steps(&self, ctx: &mut Ctx, t: usize) -> Result<Vec<Vec<usize>>> {
        if t < 2 {
            return Err(Error::Shape("contrastive consistency needs at least two frames".into()));
        }
        Ok((0..self.cfg.negatives)
            .map(|_| (0..t).map(|i| sample_except(&mut ctx.rng, t, i)).collect())
            .collect())
    }

    /// The configured objective on one utterance. Masks are drawn from
    /// `ctx.rng`.
    pub fn loss(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Var> {
        let (t, d) = (x.rows(), x.cols());
        let spec = &self.cfg.mask;
        let m1 = gen_mask_with(spec, t, d, &mut ctx.rng)?;
        Ok(match self.cfg.objective {
            MaskedObjective::Bert => self.masked_recon_loss(ctx, x, &m1, false)?,
            MaskedObjective::BertHalf => self.masked_recon_loss(ctx, x, &m1, true)?,
            MaskedObjective::Bicpc => self.bicpc_loss(ctx, x, &m1, false)?.loss,
            MaskedObjective::BicpcHalf => self.bicpc_loss(ctx, x, &m1, true)?.loss,
            _ => {
                let m2 = gen_mask_with(spec, t, d, &mut ctx.rng)?;
                self.multiview_loss(ctx, x, &m1, &m2)?
            }
        })
    }

    pub fn batch_loss(&self, ctx: &mut Ctx, utts: &[&Utterance]) -> Result<Var> {
        if utts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let terms = utts
            .iter()
            .map(|u| self.loss(ctx, &u.frames))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_of(&mut ctx.g, &terms))
    }

    /// Context vectors of the unmasked input.
    pub fn features(&self, params: &Params, x: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(params, 0, false);
        let m = MaskMatrix::all_observed(x.rows(), x.cols());
        self.check(x, &m)?;
        let c = self.context(&mut ctx, x, &m);
        Ok(ctx.value(c).clone())
    }
}

/// `sum_i -log(exp(a_i b_i) / (exp(a_i b_i) + sum_n exp(a_i b_{idx[n][i]})))`.
fn contrast_direction(g: &mut Graph, a: Var, b: Var, idx: &[Vec<usize>]) -> Var {
    let pos = dots(g, a, b);
    let negs: Vec<Var> = idx
        .iter()
        .map(|ix| {
            let bn = g.gather_rows(b, ix);
            dots(g, a, bn)
        })
        .collect();
    let neg = g.concat_cols(&negs);
    let r = infonce_rows(g, pos, neg);
    g.sum(r)
}

fn predict_direction(g: &mut Graph, c: Var, z: Var, shuffles: &[Vec<usize>]) -> Var {
    contrast_direction(g, c, z, shuffles)
}

/// Adds one identity-initialised linear input layer to a recogniser.
pub fn lin_adapt(rec: &Recognizer) -> Result<Recognizer> {
    let mut cfg = rec.cfg.clone();
    cfg.lin_layers += 1;
    Recognizer::new(cfg)
}

/// Fresh recogniser parameters from `seed` with every encoder tensor
/// (`enc.*`) copied from a pretrained checkpoint. Missing or differently
/// shaped tensors are an error naming each of them.
pub fn finetune_init(rec: &Recognizer, pretrained: &Params, seed: u64) -> Result<Params> {
    let mut p = rec.init(seed);
    p.load_prefix(pretrained, "enc.")?;
    Ok(p)
}

/// Seed for the masks of one utterance in one epoch.
pub fn mask_seed(base: u64, epoch: usize, utt: usize) -> MaskSpec {
    MaskSpec {
        seed: crate::nn::mix_seed(&[base, epoch as u64, utt as u64]),
        ..MaskSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infonce_constant_scores() {
        for n in [1usize, 3, 7] {
            let mut g = Graph::new();
            let pos = g.constant(Tensor::full(4, 1, 0.3));
            let neg = g.constant(Tensor::full(4, n, 0.3));
            let l = infonce(&mut g, pos, neg);
            assert!((g.value(l).item() - ((n + 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_confident_limit() {
        let mut g = Graph::new();
        let pos = g.constant(Tensor::full(2, 1, 50.0));
        let neg = g.constant(Tensor::zeros(2, 3));
        let l = infonce(&mut g, pos, neg);
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn cpc_rejects_k_zero() {
        let cfg = CpcConfig {
            input_dim: 2,
            k: 0,
            negatives: 1,
            latent_hidden: vec![],
            latent: 2,
            context_hidden: 2,
            context_layers: 1,
            negative_mode: NegativeMode::Within,
        };
        assert!(Cpc::new(cfg).is_err());
    }

    #[test]
    fn zero_masks_rejected() {
        let cfg = MaskedPretrainConfig {
            input_dim: 2,
            hidden: 2,
            layers: 1,
            dec_hidden: vec![],
            objective: MaskedObjective::Bert,
            mask: MaskSpec::none(),
            alpha: 0.5,
            negatives: 1,
        };
        assert!(matches!(MaskedModel::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sample_except_never_hits_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_ne!(sample_except(&mut rng, 3, 1), 1);
        }
    }
}
