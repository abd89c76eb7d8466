//! Feedforward representation learners over stacked frame windows.
//!
//! Every variant shares one architecture: an MLP encoder ending in a
//! Gaussian (or mean-only) bottleneck of width `latent`, and a mirrored MLP
//! decoder back to the window. Losses are averaged over the rows of a batch.
//!
//! | variant | per-row loss |
//! |---|---|
//! | `ae` | `\|x - F(mu(x))\|^2 / 2` |
//! | `dae_bernoulli`, `dae_gaussian` | `\|x - F(mu(x~))\|^2 / 2`, `x~` = corrupted `x` |
//! | `vae` | `\|x - F(mu + eps*sigma)\|^2 / 2 + beta KL(q \|\| N(0, I))` |
//! | `nae` | `\|x - F(mu + eps*sigma)\|^2 / 2 + beta \|mu\|^2 / 2` |
//! | `dropout_bottleneck` | `\|x - F(drop(mu))\|^2 / 2` |
//! | `dropout_layerwise` | AE with dropout after every hidden activation |
//!
//! The reconstruction term uses the same `1/2` factor in every variant, so a
//! VAE with `beta = 0` and no sampling noise has exactly the AE loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::ctc_loss_node;
use crate::dataio::{window_stack, Dataset, Utterance};
use crate::distributions::{kl_rows, kl_variance_rows, PriorRows};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{half_sq_err_rows, mean_of, reparameterize, weighted_sum, Activation, Ctx, Dropout, Linear, Mlp, Params, RecurrentStack};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FfVariant {
    Ae,
    DaeBernoulli { p: f64 },
    DaeGaussian { gamma: f64 },
    Nae { beta: f64 },
    Vae { beta: f64 },
    DropoutBottleneck { dropout: Dropout },
    DropoutLayerwise { p: f64 },
}

impl FfVariant {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, FfVariant::Vae { .. } | FfVariant::Nae { .. })
    }

    fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| {
            if b >= 0.0 && b.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("beta {b} must be non-negative")))
            }
        };
        match *self {
            FfVariant::Ae => Ok(()),
            FfVariant::DaeBernoulli { p } | FfVariant::DropoutLayerwise { p } => Dropout::Bernoulli { p }.validate(),
            FfVariant::DaeGaussian { gamma } => Dropout::Gaussian { gamma }.validate(),
            FfVariant::Nae { beta } | FfVariant::Vae { beta } => beta_ok(beta),
            FfVariant::DropoutBottleneck { dropout } => dropout.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfConfig {
    /// Width of one input window (`W * D`).
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub variant: FfVariant,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Posterior samples averaged per datum for the stochastic variants.
    #[serde(default = "one")]
    pub samples: usize,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn one() -> usize {
    1
}

impl FfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("need at least one posterior sample".into()));
        }
        self.variant.validate()
    }
}

/// Values produced by one [`FfModel::loss`] call.
#[derive(Clone, Copy, Debug)]
pub struct FfOutput {
    /// Batch-mean loss.
    pub loss: Var,
    pub mu: Var,
    pub logvar: Option<Var>,
    /// Batch-mean reconstruction term.
    pub recon: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfModel {
    pub cfg: FfConfig,
    body: Option<Mlp>,
    mu: Linear,
    logvar: Option<Linear>,
    dec: Mlp,
}

impl FfModel {
    pub fn new(cfg: FfConfig) -> Result<Self> {
        Self::with_prefix(cfg, "ff")
    }

    /// Parameter names start with `prefix`.
    pub fn with_prefix(cfg: FfConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let act = cfg.activation;
        let mut enc_dims = vec![cfg.input_dim];
        enc_dims.extend(&cfg.hidden);
        let top = *enc_dims.last().expect("non-empty");
        let mut body = (enc_dims.len() > 1).then(|| Mlp::new(&format!("{prefix}.enc"), &enc_dims, act, act));
        let mut dec_dims = vec![cfg.latent];
        dec_dims.extend(cfg.hidden.iter().rev());
        dec_dims.push(cfg.input_dim);
        let mut dec = Mlp::new(&format!("{prefix}.dec"), &dec_dims, act, Activation::Identity);
        if let FfVariant::DropoutLayerwise { p } = cfg.variant {
            let d = Some(Dropout::Bernoulli { p });
            if let Some(b) = body.as_mut() {
                b.dropout = d;
            }
            dec.dropout = d;
        }
        Ok(FfModel {
            mu: Linear::new(format!("{prefix}.mu"), top, cfg.latent),
            logvar: cfg
                .variant
                .is_stochastic()
                .then(|| Linear::new(format!("{prefix}.lv"), top, cfg.latent)),
            body,
            dec,
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
        if let Some(b) = &self.body {
            b.init(p, &mut rng);
        }
        self.mu.init(p, &mut rng);
        if let Some(l) = &self.logvar {
            l.init(p, &mut rng);
        }
        self.dec.init(p, &mut rng);
    }

    fn encode_body(&self, ctx: &mut Ctx, x: Var) -> Var {
        match &self.body {
            Some(b) => {
                let h = b.forward(ctx, x);
                // The last encoder layer also gets dropout in the layer-wise variant.
                match (b.dropout, ctx.train) {
                    (Some(d), true) => d.apply(ctx, h),
                    _ => h,
                }
            }
            None => x,
        }
    }

    /// Posterior mean and (for stochastic variants) clamped log-variance.
    pub fn encode(&self, ctx: &mut Ctx, x: Var) -> (Var, Option<Var>) {
        let h = self.encode_body(ctx, x);
        let mu = self.mu.forward(ctx, h);
        let lv = self.logvar.as_ref().map(|l| {
            let lv = l.forward(ctx, h);
            ctx.g.clamp(lv, -crate::nn::LOGVAR_CLAMP, crate::nn::LOGVAR_CLAMP)
        });
        (mu, lv)
    }

    pub fn decode(&self, ctx: &mut Ctx, z: Var) -> Var {
        self.dec.forward(ctx, z)
    }

    /// Training-mode loss of a batch of windows (`n x input_dim`). In eval
    /// mode no corruption or dropout is applied and stochastic variants use
    /// the posterior mean.
    pub fn loss(&self, ctx: &mut Ctx, x: &Tensor) -> Result<FfOutput> {
        if x.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "feedforward input window",
                expected: self.cfg.input_dim,
                got: x.cols(),
            });
        }
        let xv = ctx.input(x.clone());
        self.loss_var(ctx, xv, None)
    }

    /// Loss of an input node. For the VAE, `prior` replaces the standard
    /// normal prior row by row.
    pub fn loss_var(&self, ctx: &mut Ctx, xv: Var, prior: Option<&PriorRows>) -> Result<FfOutput> {
        let train = ctx.train;
        let input = match self.cfg.variant {
            FfVariant::DaeBernoulli { p } if train => Dropout::Bernoulli { p }.apply(ctx, xv),
            FfVariant::DaeGaussian { gamma } if train => Dropout::Gaussian { gamma }.apply(ctx, xv),
            _ => xv,
        };
        let (mu, lv) = self.encode(ctx, input);
        let kappa = if train { 1.0 } else { 0.0 };
        let samples = if self.cfg.variant.is_stochastic() && train {
            self.cfg.samples
        } else {
            1
        };
        let mut recons = Vec::with_capacity(samples);
        for _ in 0..samples {
            let z = match (self.cfg.variant, lv) {
                (FfVariant::Vae { .. } | FfVariant::Nae { .. }, Some(lv)) => reparameterize(ctx, mu, lv, kappa),
                (FfVariant::DropoutBottleneck { dropout }, _) if train => dropout.apply(ctx, mu),
                _ => mu,
            };
            let y = self.decode(ctx, z);
            let r = half_sq_err_rows(&mut ctx.g, xv, y);
            recons.push(ctx.g.mean(r));
        }
        let recon = mean_of(&mut ctx.g, &recons);
        let loss = match (self.cfg.variant, lv) {
            (FfVariant::Vae { beta }, Some(lv)) => {
                let kl = kl_rows(&mut ctx.g, mu, lv, prior);
                let kl = ctx.g.mean(kl);
                weighted_sum(&mut ctx.g, recon, 1.0, kl, beta)
            }
            (FfVariant::Nae { beta }, Some(_)) => {
                let m2 = ctx.g.square(mu);
                let s = ctx.g.sum_cols(m2);
                let s = ctx.g.mean(s);
                weighted_sum(&mut ctx.g, recon, 1.0, s, 0.5 * beta)
            }
            _ => recon,
        };
        Ok(FfOutput {
            loss,
            mu,
            logvar: lv,
            recon,
        })
    }

    /// Batch-mean `sum(sigma^2/2 - log sigma - 1/2)`: the part of the KL that
    /// the NAE drops.
    pub fn variance_kl(&self, ctx: &mut Ctx, out: &FfOutput) -> Option<Var> {
        out.logvar.map(|lv| {
            let r = kl_variance_rows(&mut ctx.g, lv);
            ctx.g.mean(r)
        })
    }

    /// Posterior means for a batch of windows, computed without sampling.
    pub fn features(&self, params: &Params, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "feedforward input window",
                expected: self.cfg.input_dim,
                got: x.cols(),
            });
        }
        let mut ctx = Ctx::new(params, 0, false);
        let xv = ctx.input(x.clone());
        let (mu, _) = self.encode(&mut ctx, xv);
        Ok(ctx.value(mu).clone())
    }
}

/// Per-frame posterior means of every utterance, from `w`-frame windows.
pub fn extract_features(model: &FfModel, params: &Params, data: &Dataset, w: usize) -> Result<Vec<Tensor>> {
    data.utterances
        .iter()
        .map(|u| {
            let win = window_stack(&u.frames, w)?;
            model.features(params, &win)
        })
        .collect()
}

/// A feedforward encoder whose per-frame samples feed recurrent layers and
/// a CTC output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FfMultitask {
    pub ff: FfModel,
    pub window: usize,
    pub rec: RecurrentStack,
    pub out: Linear,
}

impl FfMultitask {
    pub fn new(ff: FfConfig, window: usize, rec_hidden: usize, rec_layers: usize, vocab: usize) -> Result<Self> {
        if rec_layers == 0 || rec_hidden == 0 {
            return Err(Error::Config("multitask model needs at least one recurrent layer".into()));
        }
        let latent = ff.latent;
        let ff = FfModel::new(ff)?;
        let rec = RecurrentStack::new("mt.rec", latent, rec_hidden, rec_layers, true);
        let out = Linear::new("mt.out", rec.dout(), vocab + 1);
        Ok(FfMultitask { ff, window, rec, out })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = self.ff.init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d74);
        self.rec.init(&mut p, &mut rng);
        self.out.init(&mut p, &mut rng);
        p
    }

    /// `(1 - alpha) * CTC + alpha * (-ELBO)`, averaged over utterances.
    /// The ELBO term is the frame-averaged feedforward loss.
    pub fn loss(&self, ctx: &mut Ctx, utts: &[&Utterance], alpha: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("multitask weight {alpha} outside [0, 1]")));
        }
        let mut terms = Vec::with_capacity(utts.len());
        for u in utts {
            let tr = u
                .transcript
                .as_ref()
                .ok_or_else(|| Error::Config(format!("utterance `{}` has no transcript", u.id)))?;
            let win = window_stack(&u.frames, self.window)?;
            let out = self.ff.loss(ctx, &win)?;
            let z = match out.logvar {
                Some(lv) if ctx.train => reparameterize(ctx, out.mu, lv, 1.0),
                _ => out.mu,
            };
            let h = self.rec.forward(ctx, z);
            let logits = self.out.forward(ctx, h);
            let lp = ctx.g.log_softmax(logits);
            let ctc = ctc_loss_node(&mut ctx.g, lp, tr)?;
            terms.push(weighted_sum(&mut ctx.g, ctc, 1.0 - alpha, out.loss, alpha));
        }
        Ok(mean_of(&mut ctx.g, &terms))
    }
}
