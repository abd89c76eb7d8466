//! Every model trains for an epoch and yields one feature row per step.

use seqrep::dataio::{gen_synthetic, Dataset, MaskSpec, ReconTargetSpec, SynthConfig};
use seqrep::ffmodels::{FfConfig, FfVariant};
use seqrep::multiview::{LabelEmbedConfig, SimilarityLoss, VccapConfig};
use seqrep::nn::Activation;
use seqrep::pretrain::{CpcConfig, MaskedObjective, MaskedPretrainConfig, NegativeMode};
use seqrep::recognizer::RecognizerConfig;
use seqrep::recrep::{AuxMode, FbConfig, RecRepConfig, Supervision};
use seqrep::tasks::{ModelSpec, TaskOptions};
use seqrep::trainer::{train, TrainConfig};

fn data() -> Dataset {
    let cfg = SynthConfig {
        n_states: 3,
        dim: 5,
        n_utterances: 8,
        min_len: 12,
        max_len: 16,
        view2_dim: 3,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, 4).unwrap()
}

fn specs(ds: &Dataset) -> Vec<ModelSpec> {
    let d = ds.dim();
    let v = ds.vocab;
    let vccap = VccapConfig {
        dx: 3 * d,
        dy: 3 * 3,
        hidden: vec![6],
        d_z: 2,
        d_h1: 1,
        d_h2: 1,
        beta: 1.0,
        activation: Activation::Tanh,
        split: 0,
    };
    let recrep = RecRepConfig {
        input_dim: d,
        hidden: 4,
        shared_layers: 2,
        private_layers: 1,
        pyramid: vec![false, true],
        latent: 2,
        aux: AuxMode::Flat,
        aux_dim: 1,
        dec_hidden: vec![],
        beta: 1.0,
        alpha: 0.5,
        kappa: 1.0,
        target: ReconTargetSpec::current(),
        vocab: v,
        supervision: Supervision::Framewise,
        normalize_supervised: false,
    };
    let masked = |objective| ModelSpec::Masked {
        config: MaskedPretrainConfig {
            input_dim: d,
            hidden: 3,
            layers: 1,
            dec_hidden: vec![],
            objective,
            mask: MaskSpec {
                n_time_masks: 1,
                max_time_width: 3,
                n_channel_masks: 1,
                max_channel_width: 2,
                seed: 0,
            },
            alpha: 0.5,
            negatives: 2,
        },
    };
    vec![
        ModelSpec::Ff {
            config: FfConfig {
                input_dim: 3 * d,
                hidden: vec![6],
                latent: 2,
                variant: FfVariant::Vae { beta: 1.0 },
                activation: Activation::Tanh,
                samples: 1,
            },
            window: 3,
        },
        ModelSpec::Vcca {
            config: VccapConfig {
                d_h1: 0,
                d_h2: 0,
                ..vccap.clone()
            },
            window: 3,
        },
        ModelSpec::Vccap { config: vccap, window: 3 },
        ModelSpec::RecRep { config: recrep },
        ModelSpec::Fb {
            config: FbConfig {
                input_dim: d,
                hidden: 4,
                d_f: 2,
                d_b: 2,
                d_zf: 0,
                d_zb: 0,
                dec_hidden: vec![],
                beta: 1.0,
                vocab: 0,
                alpha: 1.0,
            },
        },
        ModelSpec::Cpc {
            config: CpcConfig {
                input_dim: d,
                k: 2,
                negatives: 3,
                latent_hidden: vec![],
                latent: 3,
                context_hidden: 3,
                context_layers: 1,
                negative_mode: NegativeMode::Batch,
            },
        },
        masked(MaskedObjective::Bert),
        masked(MaskedObjective::BicpcHalf),
        masked(MaskedObjective::MvContrast),
        masked(MaskedObjective::CrossviewBert),
        ModelSpec::LabelEmbed {
            config: LabelEmbedConfig {
                input_dim: 3 * d,
                label_window: 3,
                vocab: v,
                hidden: vec![5],
                latent: 2,
                beta: 0.5,
                alpha1: 0.3,
                alpha2: 0.3,
                similarity: SimilarityLoss::Cosine,
                activation: Activation::Tanh,
            },
            window: 3,
        },
        ModelSpec::Recognizer {
            config: RecognizerConfig {
                input_dim: d,
                hidden: 3,
                layers: 1,
                vocab: v,
                head: Supervision::Ctc,
                pyramid: vec![],
                lin_layers: 0,
            },
        },
    ]
}

#[test]
fn each_spec_trains_and_featurizes() {
    let ds = data();
    let (tr, dev) = ds.split_at(6);
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    for spec in specs(&ds) {
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), spec);
        let task = spec.task(&tr, None, &dev, TaskOptions::default()).unwrap();
        let out = train(task.as_ref(), spec.init(1).unwrap(), &cfg).unwrap_or_else(|e| panic!("{}: {e}", spec.name()));
        assert!(out.summary.best_dev_loss.is_finite(), "{}", spec.name());
        let feats = spec.featurize(&out.best, &dev).unwrap();
        assert_eq!(feats.len(), dev.len());
        for (f, u) in feats.utterances.iter().zip(&dev.utterances) {
            assert!(f.frames.is_finite());
            let steps = if matches!(spec, ModelSpec::RecRep { .. }) { u.len() / 2 } else { u.len() };
            assert_eq!(f.len(), steps, "{}", spec.name());
        }
    }
}

#[test]
fn semi_supervised_recrep_uses_unlabeled_data() {
    let ds = data();
    let (tr, dev) = ds.split_at(4);
    let (dev, unl) = dev.split_at(2);
    let spec = &specs(&ds)[3];
    let task = spec
        .task(&tr, Some(&unl), &dev, TaskOptions { unlabeled_per_batch: 2 })
        .unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(task.as_ref(), spec.init(2).unwrap(), &cfg).unwrap();
    assert!(out.summary.best_dev_loss.is_finite());
    assert!(!out.log.series("dev", "kl").is_empty());
}
