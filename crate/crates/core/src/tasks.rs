//! Ready-made [`Task`]s for every model, and [`ModelSpec`], the serialisable
//! description stored in checkpoints so a model can be rebuilt for feature
//! extraction and evaluation.

use serde::{Deserialize, Serialize};

use crate::dataio::{window_stack, Dataset, Utterance};
use crate::distributions::PriorStore;
use crate::error::{Error, Result};
use crate::ffmodels::{FfConfig, FfModel, FfVariant};
use crate::graph::Var;
use crate::multiview::{
    label_windows, prior_updated_loss, LabelEmbedConfig, LabelEmbedding, PairedBatch, PriorBase, Vcca, Vccap,
    VccapConfig,
};
use crate::nn::{mean_of, Ctx, Params};
use crate::pretrain::{Cpc, CpcConfig, MaskedModel, MaskedPretrainConfig};
use crate::recognizer::{Recognizer, RecognizerConfig};
use crate::recrep::{FbConfig, FbModel, RecRep, RecRepConfig};
use crate::tensor::Tensor;
use crate::trainer::Task;

/// Every trainable model, with what is needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Ff { config: FfConfig, window: usize },
    Vcca { config: VccapConfig, window: usize },
    Vccap { config: VccapConfig, window: usize },
    RecRep { config: RecRepConfig },
    Fb { config: FbConfig },
    Cpc { config: CpcConfig },
    Masked { config: MaskedPretrainConfig },
    LabelEmbed { config: LabelEmbedConfig, window: usize },
    Recognizer { config: RecognizerConfig },
}

/// Options that only some tasks read.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskOptions {
    /// Unlabeled utterances added to each batch of a semi-supervised run.
    pub unlabeled_per_batch: usize,
}

fn utt_refs(ds: &Dataset) -> Vec<&Utterance> {
    ds.utterances.iter().collect()
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ff { .. } => "ff",
            ModelSpec::Vcca { .. } => "vcca",
            ModelSpec::Vccap { .. } => "vccap",
            ModelSpec::RecRep { .. } => "recrep",
            ModelSpec::Fb { .. } => "fb",
            ModelSpec::Cpc { .. } => "cpc",
            ModelSpec::Masked { .. } => "masked",
            ModelSpec::LabelEmbed { .. } => "label_embed",
            ModelSpec::Recognizer { .. } => "recognizer",
        }
    }

    pub fn init(&self, seed: u64) -> Result<Params> {
        Ok(match self {
            ModelSpec::Ff { config, .. } => FfModel::new(config.clone())?.init(seed),
            ModelSpec::Vcca { config, .. } => Vcca::new(config.clone())?.init(seed),
            ModelSpec::Vccap { config, .. } => Vccap::new(config.clone())?.init(seed),
            ModelSpec::RecRep { config } => RecRep::new(config.clone())?.init(seed),
            ModelSpec::Fb { config } => FbModel::new(config.clone())?.init(seed),
            ModelSpec::Cpc { config } => Cpc::new(config.clone())?.init(seed),
            ModelSpec::Masked { config } => MaskedModel::new(config.clone())?.init(seed),
            ModelSpec::LabelEmbed { config, .. } => LabelEmbedding::new(config.clone())?.init(seed),
            ModelSpec::Recognizer { config } => Recognizer::new(config.clone())?.init(seed),
        })
    }

    /// Representation of one utterance in evaluation mode: posterior means
    /// for the variational models, context vectors for the predictive ones
    /// and encoder outputs for a recogniser.
    pub fn features(&self, params: &Params, u: &Utterance) -> Result<Tensor> {
        match self {
            ModelSpec::Ff { config, window } => FfModel::new(config.clone())?.features(params, &window_stack(&u.frames, *window)?),
            ModelSpec::Vcca { config, window } => {
                Ok(Vcca::new(config.clone())?.features(params, &window_stack(&u.frames, *window)?))
            }
            ModelSpec::Vccap { config, window } => {
                Ok(Vccap::new(config.clone())?.features(params, &window_stack(&u.frames, *window)?))
            }
            ModelSpec::RecRep { config } => RecRep::new(config.clone())?.features(params, &u.frames),
            ModelSpec::Fb { config } => FbModel::new(config.clone())?.features(params, &u.frames),
            ModelSpec::Cpc { config } => Cpc::new(config.clone())?.features(params, &u.frames),
            ModelSpec::Masked { config } => MaskedModel::new(config.clone())?.features(params, &u.frames),
            ModelSpec::LabelEmbed { config, window } => {
                Ok(LabelEmbedding::new(config.clone())?.features(params, &window_stack(&u.frames, *window)?))
            }
            ModelSpec::Recognizer { config } => {
                let r = Recognizer::new(config.clone())?;
                let mut ctx = Ctx::new(params, 0, false);
                let h = r.encode(&mut ctx, &u.frames)?;
                Ok(ctx.value(h).clone())
            }
        }
    }

    /// A copy of `ds` whose frames are replaced by this model's features.
    /// Labels are kept when the feature sequence has one row per frame.
    pub fn featurize(&self, params: &Params, ds: &Dataset) -> Result<Dataset> {
        let utterances = ds
            .utterances
            .iter()
            .map(|u| {
                let f = self.features(params, u)?;
                let mut out = Utterance::new(u.id.clone(), f)?;
                out.speaker = u.speaker;
                if let Some(l) = &u.labels {
                    if l.len() == out.len() {
                        out = out.with_labels(l.clone())?;
                    } else {
                        out.transcript = u.transcript.clone();
                    }
                } else {
                    out.transcript = u.transcript.clone();
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            vocab: ds.vocab,
            utterances,
        })
    }

    /// The training task for this model on `train`, validated on `dev`.
    pub fn task<'a>(
        &self,
        train: &'a Dataset,
        unlabeled: Option<&'a Dataset>,
        dev: &'a Dataset,
        opts: TaskOptions,
    ) -> Result<Box<dyn Task + 'a>> {
        let windows = |w: usize, ds: &Dataset| -> Result<PairedBatch> { windows_of(ds, w, false) };
        Ok(match self {
            ModelSpec::Ff { config, window } => Box::new(WindowTask {
                model: WindowModel::Ff(FfModel::new(config.clone())?),
                train: windows(*window, train)?,
                dev: windows(*window, dev)?,
            }),
            ModelSpec::Vcca { config, window } => Box::new(WindowTask {
                model: WindowModel::Vcca(Vcca::new(config.clone())?),
                train: windows_of(train, *window, true)?,
                dev: windows_of(dev, *window, true)?,
            }),
            ModelSpec::Vccap { config, window } => Box::new(WindowTask {
                model: WindowModel::Vccap(Vccap::new(config.clone())?),
                train: windows_of(train, *window, true)?,
                dev: windows_of(dev, *window, true)?,
            }),
            ModelSpec::RecRep { config } => Box::new(RecRepTask {
                model: RecRep::new(config.clone())?,
                train: utt_refs(train),
                unlabeled: unlabeled.map(utt_refs).unwrap_or_default(),
                dev: utt_refs(dev),
                unlabeled_per_batch: opts.unlabeled_per_batch,
            }),
            ModelSpec::Fb { config } => Box::new(UttTask {
                model: UttModel::Fb(FbModel::new(config.clone())?),
                train: utt_refs(train),
                dev: utt_refs(dev),
            }),
            ModelSpec::Cpc { config } => Box::new(UttTask {
                model: UttModel::Cpc(Cpc::new(config.clone())?),
                train: utt_refs(train),
                dev: utt_refs(dev),
            }),
            ModelSpec::Masked { config } => Box::new(UttTask {
                model: UttModel::Masked(MaskedModel::new(config.clone())?),
                train: utt_refs(train),
                dev: utt_refs(dev),
            }),
            ModelSpec::LabelEmbed { config, window } => {
                let model = LabelEmbedding::new(config.clone())?;
                let lw = config.label_window;
                Box::new(LabelEmbedTask {
                    train: label_data(train, *window, lw)?,
                    dev: label_data(dev, *window, lw)?,
                    model,
                })
            }
            ModelSpec::Recognizer { config } => Box::new(UttTask {
                model: UttModel::Recognizer(Recognizer::new(config.clone())?),
                train: utt_refs(train),
                dev: utt_refs(dev),
            }),
        })
    }
}

/// Windows of every utterance, one row per frame. With `paired` the second
/// view is required; otherwise `y` repeats `x`.
pub fn windows_of(ds: &Dataset, w: usize, paired: bool) -> Result<PairedBatch> {
    let refs = utt_refs(ds);
    if paired {
        return PairedBatch::from_utterances(&refs, w);
    }
    let mut xs = Vec::with_capacity(refs.len());
    let mut keys = Vec::new();
    for u in &refs {
        xs.push(window_stack(&u.frames, w)?);
        keys.extend((0..u.len()).map(|t| (u.id.clone(), t)));
    }
    let xr: Vec<&Tensor> = xs.iter().collect();
    let x = Tensor::concat_rows(&xr);
    PairedBatch::new(x.clone(), x, keys)
}

fn label_data(ds: &Dataset, w: usize, lw: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for u in &ds.utterances {
        let l = u
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("utterance `{}` has no frame labels", u.id)))?;
        xs.push(window_stack(&u.frames, w)?);
        labels.extend(label_windows(l, lw)?);
    }
    let xr: Vec<&Tensor> = xs.iter().collect();
    Ok((Tensor::concat_rows(&xr), labels))
}

pub enum WindowModel {
    Ff(FfModel),
    Vcca(Vcca),
    Vccap(Vccap),
}

impl WindowModel {
    fn base(&self) -> Option<PriorBase<'_>> {
        match self {
            WindowModel::Ff(m) if matches!(m.cfg.variant, FfVariant::Vae { .. }) => Some(PriorBase::Vae(m)),
            WindowModel::Ff(_) => None,
            WindowModel::Vcca(m) => Some(PriorBase::Vcca(m)),
            WindowModel::Vccap(m) => Some(PriorBase::Vccap(m)),
        }
    }

    fn loss(&self, ctx: &mut Ctx, batch: &PairedBatch, store: Option<&PriorStore>) -> Result<Var> {
        match (self.base(), store, self) {
            (Some(b), Some(s), _) => prior_updated_loss(ctx, b, batch, s),
            (Some(b), None, _) => b.loss(ctx, batch, None),
            (None, _, WindowModel::Ff(m)) => Ok(m.loss(ctx, &batch.x)?.loss),
            (None, _, _) => unreachable!("only feedforward models lack a prior base"),
        }
    }
}

/// Feed-forward and two-view models trained on stacked windows.
pub struct WindowTask {
    pub model: WindowModel,
    pub train: PairedBatch,
    pub dev: PairedBatch,
}

impl Task for WindowTask {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(&self, ctx: &mut Ctx, batch: &[usize], store: Option<&PriorStore>) -> Result<Var> {
        self.model.loss(ctx, &self.train.rows(batch), store)
    }

    fn dev_loss(&self, params: &Params, _store: Option<&PriorStore>) -> Result<f64> {
        let mut ctx = Ctx::new(params, 0, false);
        let l = self.model.loss(&mut ctx, &self.dev, None)?;
        Ok(ctx.value(l).item())
    }

    fn snapshot_priors(&self, params: &Params, tag: u64) -> Result<Option<PriorStore>> {
        self.model
            .base()
            .map(|b| b.snapshot(params, &self.train, tag))
            .transpose()
    }
}

pub enum UttModel {
    Fb(FbModel),
    Cpc(Cpc),
    Masked(MaskedModel),
    Recognizer(Recognizer),
}

impl UttModel {
    fn loss(&self, ctx: &mut Ctx, utts: &[&Utterance]) -> Result<Var> {
        match self {
            UttModel::Fb(m) => {
                let terms = utts.iter().map(|u| m.loss(ctx, u)).collect::<Result<Vec<_>>>()?;
                Ok(mean_of(&mut ctx.g, &terms))
            }
            UttModel::Cpc(m) => m.loss(ctx, utts),
            UttModel::Masked(m) => m.batch_loss(ctx, utts),
            UttModel::Recognizer(m) => m.batch_loss(ctx, utts),
        }
    }
}

/// Sequence models whose loss is a mean over utterances.
pub struct UttTask<'a> {
    pub model: UttModel,
    pub train: Vec<&'a Utterance>,
    pub dev: Vec<&'a Utterance>,
}

fn mean_dev<F: Fn(&mut Ctx, &Utterance) -> Result<Var>>(params: &Params, dev: &[&Utterance], f: F) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Config("no held-out utterances".into()));
    }
    let mut total = 0.0;
    for u in dev {
        let mut ctx = Ctx::new(params, 0, false);
        let l = f(&mut ctx, u)?;
        total += ctx.value(l).item();
    }
    Ok(total / dev.len() as f64)
}

impl Task for UttTask<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(&self, ctx: &mut Ctx, batch: &[usize], _store: Option<&PriorStore>) -> Result<Var> {
        let utts: Vec<&Utterance> = batch.iter().map(|&i| self.train[i]).collect();
        self.model.loss(ctx, &utts)
    }

    fn dev_loss(&self, params: &Params, _store: Option<&PriorStore>) -> Result<f64> {
        mean_dev(params, &self.dev, |ctx, u| self.model.loss(ctx, &[u]))
    }

    fn dev_metrics(&self, params: &Params) -> Result<Vec<(String, f64)>> {
        let UttModel::Recognizer(r) = &self.model else {
            return Ok(Vec::new());
        };
        let rep = r.evaluate(params, &self.dev)?;
        let mut out = Vec::new();
        if let Some(a) = rep.frame_accuracy {
            out.push(("frame_accuracy".to_string(), a));
        }
        if let Some(e) = rep.error_rate {
            out.push(("error_rate".to_string(), e));
        }
        Ok(out)
    }
}

/// RecRep and its multitask and semi-supervised forms.
pub struct RecRepTask<'a> {
    pub model: RecRep,
    pub train: Vec<&'a Utterance>,
    pub unlabeled: Vec<&'a Utterance>,
    pub dev: Vec<&'a Utterance>,
    pub unlabeled_per_batch: usize,
}

impl Task for RecRepTask<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(&self, ctx: &mut Ctx, batch: &[usize], store: Option<&PriorStore>) -> Result<Var> {
        let utts: Vec<&Utterance> = batch.iter().map(|&i| self.train[i]).collect();
        if self.unlabeled.is_empty() || self.unlabeled_per_batch == 0 {
            return self.model.batch_loss(ctx, &utts, store);
        }
        use rand::Rng;
        let extra: Vec<&Utterance> = (0..self.unlabeled_per_batch)
            .map(|_| self.unlabeled[ctx.rng.random_range(0..self.unlabeled.len())])
            .collect();
        // Semi-supervised runs never snapshot a store (see `snapshot_priors`).
        self.model.semi_supervised_loss(ctx, &utts, &extra, None)
    }

    fn dev_loss(&self, params: &Params, _store: Option<&PriorStore>) -> Result<f64> {
        mean_dev(params, &self.dev, |ctx, u| self.model.joint_loss(ctx, u, None))
    }

    fn dev_metrics(&self, params: &Params) -> Result<Vec<(String, f64)>> {
        let mut out = vec![("kl".to_string(), self.model.mean_kl_to_standard(params, &self.dev)?)];
        if self.model.cfg.alpha < 1.0 {
            out.push(("supervised_loss".to_string(), self.model.eval_supervised(params, &self.dev)?));
        }
        Ok(out)
    }

    fn snapshot_priors(&self, params: &Params, tag: u64) -> Result<Option<PriorStore>> {
        if !self.unlabeled.is_empty() && self.unlabeled_per_batch > 0 {
            return Ok(None);
        }
        self.model.snapshot_priors(params, &self.train, tag).map(Some)
    }
}

pub struct LabelEmbedTask {
    pub model: LabelEmbedding,
    pub train: (Tensor, Vec<Vec<usize>>),
    pub dev: (Tensor, Vec<Vec<usize>>),
}

impl Task for LabelEmbedTask {
    fn train_len(&self) -> usize {
        self.train.0.rows()
    }

    fn batch_loss(&self, ctx: &mut Ctx, batch: &[usize], _store: Option<&PriorStore>) -> Result<Var> {
        let x = self.train.0.gather_rows(batch);
        let l: Vec<Vec<usize>> = batch.iter().map(|&i| self.train.1[i].clone()).collect();
        self.model.loss(ctx, &x, &l)
    }

    fn dev_loss(&self, params: &Params, _store: Option<&PriorStore>) -> Result<f64> {
        let mut ctx = Ctx::new(params, 0, false);
        let l = self.model.loss(&mut ctx, &self.dev.0, &self.dev.1)?;
        Ok(ctx.value(l).item())
    }
}
