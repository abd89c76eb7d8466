//! The run configuration file.
//!
//! A TOML document with five sections. Every key is optional; missing keys
//! take the values shown by `seqrep --print-config`, and unknown keys are
//! rejected.
//!
//! ```toml
//! [data]      # synthetic generator and how datasets are split
//! [model]     # the model trained by `train`
//! [pretrain]  # the model trained by `pretrain`
//! [train]     # optimiser, schedule and prior updating
//! [eval]      # default metric for `eval`
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use seqrep::dataio::{MaskSpec, ReconTargetSpec, SynthConfig};
use seqrep::ffmodels::{FfConfig, FfVariant};
use seqrep::multiview::{LabelEmbedConfig, SimilarityLoss, VccapConfig};
use seqrep::nn::{Activation, Dropout};
use seqrep::pretrain::{CpcConfig, MaskedObjective, MaskedPretrainConfig, NegativeMode};
use seqrep::recognizer::RecognizerConfig;
use seqrep::recrep::{AuxMode, FbConfig, RecRepConfig, Supervision};
use seqrep::tasks::ModelSpec;
use seqrep::trainer::TrainConfig;

use crate::Failure;

/// Environment variable that replaces `train.seed`.
pub const SEED_VAR: &str = "SEQREP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelSection::default(),
            pretrain: ModelSection {
                kind: ModelKind::Vae,
                ..ModelSection::default()
            },
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Failure::Invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or the defaults when `path` is `None`, then
    /// applies the seed override from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Invalid(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var(SEED_VAR) {
            cfg.train.seed = s
                .trim()
                .parse()
                .map_err(|_| Failure::Invalid(format!("{SEED_VAR}={s} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.data.synth().validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Synthetic data generation and dataset splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub n_states: usize,
    pub dim: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub n_utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub mean_scale: f64,
    pub n_speakers: usize,
    pub speaker_scale: f64,
    pub view2_dim: usize,
    pub view2_noise: f64,
    /// `gen-data` moves this many trailing utterances, without labels, into
    /// an `unlabeled/` subdirectory.
    pub n_unlabeled: usize,
    /// Leading utterances of `--data` held out for model selection.
    pub n_dev: usize,
    /// Cap on training utterances after the held-out ones; 0 keeps all.
    pub n_train: usize,
    /// Unlabeled dataset for semi-supervised `train` runs; empty for none.
    pub unlabeled: String,
    pub unlabeled_per_batch: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataSection {
            seed: 0,
            n_states: s.n_states,
            dim: s.dim,
            min_segment: s.min_segment,
            max_segment: s.max_segment,
            n_utterances: s.n_utterances,
            min_len: s.min_len,
            max_len: s.max_len,
            noise: s.noise,
            mean_scale: s.mean_scale,
            n_speakers: s.n_speakers,
            speaker_scale: s.speaker_scale,
            view2_dim: s.view2_dim,
            view2_noise: s.view2_noise,
            n_unlabeled: 0,
            n_dev: 10,
            n_train: 0,
            unlabeled: String::new(),
            unlabeled_per_batch: 2,
        }
    }
}

impl DataSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_states: self.n_states,
            dim: self.dim,
            min_segment: self.min_segment,
            max_segment: self.max_segment,
            n_utterances: self.n_utterances,
            min_len: self.min_len,
            max_len: self.max_len,
            noise: self.noise,
            mean_scale: self.mean_scale,
            n_speakers: self.n_speakers,
            speaker_scale: self.speaker_scale,
            view2_dim: self.view2_dim,
            view2_noise: self.view2_noise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Ae,
    /// Denoising autoencoder with a Bernoulli keep-mask.
    Dae,
    /// Denoising autoencoder with multiplicative Gaussian noise.
    DaeGaussian,
    Nae,
    Vae,
    DropoutBottleneck,
    DropoutLayerwise,
    Vcca,
    Vccap,
    Recrep,
    RecrepPyramid,
    Fb,
    Cpc,
    Bert,
    BertHalf,
    Bicpc,
    BicpcHalf,
    MvMae,
    MvContrast,
    CrossviewBert,
    LabelEmbed,
    Recognizer,
}

/// Model knobs shared by every kind; each kind reads the ones it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Width of each hidden or recurrent layer.
    pub hidden: usize,
    /// Hidden layers of a feedforward encoder, or recurrent encoder depth.
    pub layers: usize,
    pub latent: usize,
    /// Odd context window for the frame-level models.
    pub window: usize,
    pub beta: f64,
    /// Mixing weight: the ELBO share of a multitask loss, or the
    /// reconstruction share of a multi-view masked objective.
    pub alpha: f64,
    pub kappa: f64,
    /// Drop probability for `dae` and the dropout variants.
    pub dropout: f64,
    /// Noise scale for `dae-gaussian`.
    pub gamma: f64,
    pub samples: usize,
    pub activation: Activation,
    /// Private latent width of `vccap`, and the forward/backward state
    /// width of `fb`.
    pub private_dim: usize,
    pub aux: AuxMode,
    pub aux_dim: usize,
    pub private_layers: usize,
    pub dec_hidden: Vec<usize>,
    /// Per-layer halving flags. Empty means none, except for
    /// `recrep-pyramid`, which then halves after its last shared layer.
    pub pyramid: Vec<bool>,
    pub head: Supervision,
    pub target: ReconTargetSpec,
    /// CPC prediction horizon.
    pub steps: usize,
    pub negatives: usize,
    pub negative_mode: NegativeMode,
    pub mask: MaskSpec,
    pub label_window: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub similarity: SimilarityLoss,
    /// Identity-initialised input layers of a recogniser.
    pub lin_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Recognizer,
            hidden: 32,
            layers: 2,
            latent: 16,
            window: 3,
            beta: 1.0,
            alpha: 0.5,
            kappa: 1.0,
            dropout: 0.2,
            gamma: 0.5,
            samples: 1,
            activation: Activation::Tanh,
            private_dim: 4,
            aux: AuxMode::None,
            aux_dim: 0,
            private_layers: 1,
            dec_hidden: vec![32],
            pyramid: Vec::new(),
            head: Supervision::Framewise,
            target: ReconTargetSpec::current(),
            steps: 3,
            negatives: 4,
            negative_mode: NegativeMode::Within,
            mask: MaskSpec::default(),
            label_window: 5,
            alpha1: 1.0,
            alpha2: 1.0,
            similarity: SimilarityLoss::L2,
            lin_layers: 0,
        }
    }
}

/// Shapes of the data a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub dim: usize,
    pub vocab: usize,
    pub view2_dim: usize,
}

impl ModelSection {
    /// The concrete model for data of the given shape. Configuration errors
    /// surface when the model is constructed.
    pub fn spec(&self, shape: DataShape) -> ModelSpec {
        let hidden = vec![self.hidden; self.layers];
        let w = self.window;
        let ff = |variant| ModelSpec::Ff {
            config: FfConfig {
                input_dim: w * shape.dim,
                hidden: hidden.clone(),
                latent: self.latent,
                variant,
                activation: self.activation,
                samples: self.samples,
            },
            window: w,
        };
        let vccap = |private: usize| VccapConfig {
            dx: w * shape.dim,
            dy: w * shape.view2_dim,
            hidden: hidden.clone(),
            d_z: self.latent,
            d_h1: private,
            d_h2: private,
            beta: self.beta,
            activation: self.activation,
            split: 0,
        };
        let recrep = |pyramid: Vec<bool>| ModelSpec::RecRep {
            config: RecRepConfig {
                input_dim: shape.dim,
                hidden: self.hidden,
                shared_layers: self.layers,
                private_layers: self.private_layers,
                pyramid,
                latent: self.latent,
                aux: self.aux,
                aux_dim: self.aux_dim,
                dec_hidden: self.dec_hidden.clone(),
                beta: self.beta,
                alpha: self.alpha,
                kappa: self.kappa,
                target: self.target.clone(),
                vocab: shape.vocab,
                supervision: self.head,
                normalize_supervised: false,
            },
        };
        let masked = |objective| ModelSpec::Masked {
            config: MaskedPretrainConfig {
                input_dim: shape.dim,
                hidden: self.hidden,
                layers: self.layers,
                dec_hidden: self.dec_hidden.clone(),
                objective,
                mask: self.mask.clone(),
                alpha: self.alpha,
                negatives: self.negatives,
            },
        };
        match self.kind {
            ModelKind::Ae => ff(FfVariant::Ae),
            ModelKind::Dae => ff(FfVariant::DaeBernoulli { p: self.dropout }),
            ModelKind::DaeGaussian => ff(FfVariant::DaeGaussian { gamma: self.gamma }),
            ModelKind::Nae => ff(FfVariant::Nae { beta: self.beta }),
            ModelKind::Vae => ff(FfVariant::Vae { beta: self.beta }),
            ModelKind::DropoutBottleneck => ff(FfVariant::DropoutBottleneck {
                dropout: Dropout::Bernoulli { p: self.dropout },
            }),
            ModelKind::DropoutLayerwise => ff(FfVariant::DropoutLayerwise { p: self.dropout }),
            ModelKind::Vcca => ModelSpec::Vcca {
                config: vccap(0),
                window: w,
            },
            ModelKind::Vccap => ModelSpec::Vccap {
                config: vccap(self.private_dim),
                window: w,
            },
            ModelKind::Recrep => recrep(self.pyramid.clone()),
            ModelKind::RecrepPyramid => {
                let flags = if self.pyramid.is_empty() {
                    let mut f = vec![false; self.layers];
                    if let Some(last) = f.last_mut() {
                        *last = true;
                    }
                    f
                } else {
                    self.pyramid.clone()
                };
                recrep(flags)
            }
            ModelKind::Fb => ModelSpec::Fb {
                config: FbConfig {
                    input_dim: shape.dim,
                    hidden: self.hidden,
                    d_f: self.private_dim,
                    d_b: self.private_dim,
                    d_zf: self.latent,
                    d_zb: self.latent,
                    dec_hidden: self.dec_hidden.clone(),
                    beta: self.beta,
                    vocab: if self.alpha < 1.0 { shape.vocab } else { 0 },
                    alpha: self.alpha,
                },
            },
            ModelKind::Cpc => ModelSpec::Cpc {
                config: CpcConfig {
                    input_dim: shape.dim,
                    k: self.steps,
                    negatives: self.negatives,
                    latent_hidden: vec![self.hidden],
                    latent: self.latent,
                    context_hidden: self.hidden,
                    context_layers: self.layers,
                    negative_mode: self.negative_mode,
                },
            },
            ModelKind::Bert => masked(MaskedObjective::Bert),
            ModelKind::BertHalf => masked(MaskedObjective::BertHalf),
            ModelKind::Bicpc => masked(MaskedObjective::Bicpc),
            ModelKind::BicpcHalf => masked(MaskedObjective::BicpcHalf),
            ModelKind::MvMae => masked(MaskedObjective::MvMae),
            ModelKind::MvContrast => masked(MaskedObjective::MvContrast),
            ModelKind::CrossviewBert => masked(MaskedObjective::CrossviewBert),
            ModelKind::LabelEmbed => ModelSpec::LabelEmbed {
                config: LabelEmbedConfig {
                    input_dim: w * shape.dim,
                    label_window: self.label_window,
                    vocab: shape.vocab,
                    hidden: hidden.clone(),
                    latent: self.latent,
                    beta: self.beta,
                    alpha1: self.alpha1,
                    alpha2: self.alpha2,
                    similarity: self.similarity,
                    activation: self.activation,
                },
                window: w,
            },
            ModelKind::Recognizer => ModelSpec::Recognizer {
                config: RecognizerConfig {
                    input_dim: shape.dim,
                    hidden: self.hidden,
                    layers: self.layers,
                    vocab: shape.vocab,
                    head: self.head,
                    pyramid: self.pyramid.clone(),
                    lin_layers: self.lin_layers,
                },
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Metric {
    /// Held-out loss of the checkpoint's own objective.
    Loss,
    /// Framewise accuracy of a recogniser with a framewise head.
    FrameAccuracy,
    /// Edit distance of greedy decodes over reference length.
    ErrorRate,
    /// Accuracy of a nearest-class-mean classifier on the features, fitted
    /// on the first half of the utterances and scored on the second.
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: Metric,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metric: Metric::FrameAccuracy,
        }
    }
}
