//! Central-difference checks of every training loss.

mod common;

use common::{randn, tiny_data};
use seqrep::ctc::ctc_loss_node;
use seqrep::dataio::{window_stack, MaskSpec, ReconTargetSpec, TargetKind, Utterance};
use seqrep::ffmodels::{FfConfig, FfModel, FfMultitask, FfVariant};
use seqrep::graph::{gradcheck, Var};
use seqrep::multiview::{
    label_windows, prior_updated_loss, CrossDomain, CrossDomainConfig, LabelEmbedConfig, LabelEmbedding,
    PairedBatch, PriorBase, Sharing, SimilarityLoss, Vcca, Vccap, VccapConfig,
};
use seqrep::nn::{gradcheck_params, Activation, Ctx, Dropout, Params};
use seqrep::pretrain::{infonce, Cpc, CpcConfig, MaskedModel, MaskedObjective, MaskedPretrainConfig, NegativeMode};
use seqrep::recognizer::{Recognizer, RecognizerConfig, SharedTopPair};
use seqrep::recrep::{AuxMode, FbConfig, FbModel, RecRep, RecRepConfig, Supervision};
use seqrep::Result;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const COORDS: usize = 6;

fn check<F>(what: &str, params: &Params, f: F)
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let err = gradcheck_params(params, 17, EPS, COORDS, f).unwrap();
    assert!(err <= TOL, "{what}: max relative error {err:.3e}");
}

fn windows() -> PairedBatch {
    let ds = tiny_data(1);
    let utts: Vec<&Utterance> = ds.utterances.iter().collect();
    let b = PairedBatch::from_utterances(&utts, 3).unwrap();
    b.rows(&(0..10).collect::<Vec<_>>())
}

#[test]
fn feedforward_variants() {
    let x = windows().x;
    let variants = [
        FfVariant::Ae,
        FfVariant::DaeBernoulli { p: 0.3 },
        FfVariant::DaeGaussian { gamma: 0.5 },
        FfVariant::Nae { beta: 0.7 },
        FfVariant::Vae { beta: 0.7 },
        FfVariant::DropoutBottleneck {
            dropout: Dropout::Bernoulli { p: 0.2 },
        },
        FfVariant::DropoutBottleneck {
            dropout: Dropout::Gaussian { gamma: 0.4 },
        },
        FfVariant::DropoutLayerwise { p: 0.2 },
    ];
    for v in variants {
        let m = FfModel::new(FfConfig {
            input_dim: x.cols(),
            hidden: vec![5],
            latent: 3,
            variant: v,
            activation: Activation::Tanh,
            samples: 2,
        })
        .unwrap();
        let p = m.init(3);
        check(&format!("{v:?}"), &p, |ctx| Ok(m.loss(ctx, &x)?.loss));
    }
}

fn vccap_cfg(d_h1: usize, d_h2: usize) -> VccapConfig {
    let b = windows();
    VccapConfig {
        dx: b.x.cols(),
        dy: b.y.cols(),
        hidden: vec![5, 4],
        d_z: 2,
        d_h1,
        d_h2,
        beta: 0.8,
        activation: Activation::Tanh,
        split: 1,
    }
}

#[test]
fn two_view_models_and_prior_updating() {
    let b = windows();
    let vcca = Vcca::new(vccap_cfg(0, 0)).unwrap();
    let pv = vcca.init(2);
    check("vcca", &pv, |ctx| Ok(vcca.loss(ctx, &b, None)?.loss));
    let vccap = Vccap::new(vccap_cfg(2, 1)).unwrap();
    let pp = vccap.init(2);
    check("vccap", &pp, |ctx| Ok(vccap.loss(ctx, &b, None)?.loss));

    // The frozen prior comes from a different parameter draw so it does not
    // coincide with the posterior.
    let store = PriorBase::Vccap(&vccap).snapshot(&vccap.init(99), &b, 1).unwrap();
    check("vccap prior-updated", &pp, |ctx| {
        prior_updated_loss(ctx, PriorBase::Vccap(&vccap), &b, &store)
    });
    let store = PriorBase::Vcca(&vcca).snapshot(&vcca.init(98), &b, 1).unwrap();
    check("vcca prior-updated", &pv, |ctx| {
        prior_updated_loss(ctx, PriorBase::Vcca(&vcca), &b, &store)
    });
    let vae = FfModel::new(FfConfig {
        input_dim: b.x.cols(),
        hidden: vec![4],
        latent: 2,
        variant: FfVariant::Vae { beta: 1.0 },
        activation: Activation::Tanh,
        samples: 1,
    })
    .unwrap();
    let pa = vae.init(5);
    let store = PriorBase::Vae(&vae).snapshot(&vae.init(97), &b, 1).unwrap();
    check("vae prior-updated", &pa, |ctx| prior_updated_loss(ctx, PriorBase::Vae(&vae), &b, &store));
}

#[test]
fn cross_domain_objectives() {
    let b = windows();
    let tgt = randn(7, b.x.cols(), 4);
    for sharing in [Sharing::Full, Sharing::Partial { split: 1 }] {
        let m = CrossDomain::new(CrossDomainConfig {
            vccap: vccap_cfg(1, 1),
            d_ht: 2,
            sharing,
        })
        .unwrap()
        .with_recognizer(3, 1, 3);
        let p = m.init(6);
        check("vaep", &p, |ctx| m.vaep_loss(ctx, &tgt));
        check("vccap + vaep", &p, |ctx| m.loss(ctx, &b, &tgt, 0.4));
        let ds = tiny_data(2);
        let utts: Vec<&Utterance> = ds.utterances.iter().take(2).collect();
        check("cross-domain multitask", &p, |ctx| m.multitask_loss(ctx, &b, &utts, 3, 0.6, 0.4));
    }
}

#[test]
fn label_embedding_with_each_similarity() {
    let ds = tiny_data(3);
    let u = &ds.utterances[0];
    let x = window_stack(&u.frames, 3).unwrap();
    let lw = label_windows(u.labels.as_ref().unwrap(), 3).unwrap();
    let sims = [
        SimilarityLoss::L2,
        SimilarityLoss::Cosine,
        SimilarityLoss::Contrastive {
            margin: 0.5,
            negatives: 2,
        },
        SimilarityLoss::Cca {
            rx: 1e-3,
            ry: 1e-3,
            lambda: 0.1,
        },
    ];
    for s in sims {
        let m = LabelEmbedding::new(LabelEmbedConfig {
            input_dim: x.cols(),
            label_window: 3,
            vocab: ds.vocab,
            hidden: vec![5],
            latent: 2,
            beta: 0.5,
            alpha1: 0.3,
            alpha2: 0.3,
            similarity: s,
            activation: Activation::Tanh,
        })
        .unwrap();
        let p = m.init(7);
        check(&format!("label embedding {s:?}"), &p, |ctx| m.loss(ctx, &x, &lw));
    }
}

fn recrep_cfg(input_dim: usize, vocab: usize) -> RecRepConfig {
    RecRepConfig {
        input_dim,
        hidden: 3,
        shared_layers: 2,
        private_layers: 1,
        pyramid: Vec::new(),
        latent: 2,
        aux: AuxMode::None,
        aux_dim: 0,
        dec_hidden: vec![4],
        beta: 0.9,
        alpha: 0.5,
        kappa: 1.0,
        target: ReconTargetSpec::current(),
        vocab,
        supervision: Supervision::Framewise,
        normalize_supervised: false,
    }
}

#[test]
fn recurrent_variational_models() {
    let ds = tiny_data(4);
    let utts: Vec<&Utterance> = ds.utterances.iter().take(2).collect();
    let d = ds.dim();
    let base = recrep_cfg(d, ds.vocab);
    let variants = [
        ("recrep", base.clone()),
        (
            "recrep pyramid",
            RecRepConfig {
                pyramid: vec![false, true],
                ..base.clone()
            },
        ),
        (
            "recrep pyramid ctc",
            RecRepConfig {
                pyramid: vec![true, false],
                supervision: Supervision::Ctc,
                ..base.clone()
            },
        ),
        (
            "recrep flat aux",
            RecRepConfig {
                aux: AuxMode::Flat,
                aux_dim: 2,
                ..base.clone()
            },
        ),
        (
            "recrep hierarchical aux",
            RecRepConfig {
                aux: AuxMode::Hierarchical,
                aux_dim: 2,
                ..base.clone()
            },
        ),
        (
            "recrep window target",
            RecRepConfig {
                target: ReconTargetSpec::of(TargetKind::WindowConcat, 1),
                kappa: 0.5,
                ..base.clone()
            },
        ),
    ];
    for (name, cfg) in variants {
        let m = RecRep::new(cfg).unwrap();
        let p = m.init(8);
        check(name, &p, |ctx| m.batch_loss(ctx, &utts, None));
        let store = m.snapshot_priors(&m.init(80), &utts, 1).unwrap();
        check(&format!("{name} prior-updated"), &p, |ctx| m.batch_loss(ctx, &utts, Some(&store)));
    }
    let m = RecRep::new(base).unwrap();
    let p = m.init(9);
    let unl: Vec<&Utterance> = ds.utterances.iter().skip(2).collect();
    check("recrep semi-supervised", &p, |ctx| m.semi_supervised_loss(ctx, &utts, &unl, None));

    let fb = FbModel::new(FbConfig {
        input_dim: d,
        hidden: 3,
        d_f: 2,
        d_b: 2,
        d_zf: 1,
        d_zb: 1,
        dec_hidden: vec![3],
        beta: 0.5,
        vocab: ds.vocab,
        alpha: 0.7,
    })
    .unwrap();
    let p = fb.init(10);
    check("forward-backward", &p, |ctx| fb.loss(ctx, utts[0]));
}

#[test]
fn infonce_and_cpc() {
    let scores = randn(4, 4, 11);
    let err = gradcheck(
        |g, s| {
            let pos = g.slice_cols(s, 0, 1);
            let neg = g.slice_cols(s, 1, 3);
            infonce(g, pos, neg)
        },
        &scores,
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "infonce: {err:.3e}");

    let ds = tiny_data(5);
    let utts: Vec<&Utterance> = ds.utterances.iter().take(2).collect();
    for mode in [NegativeMode::Within, NegativeMode::Batch] {
        let m = Cpc::new(CpcConfig {
            input_dim: ds.dim(),
            k: 2,
            negatives: 3,
            latent_hidden: vec![4],
            latent: 3,
            context_hidden: 3,
            context_layers: 1,
            negative_mode: mode,
        })
        .unwrap();
        let p = m.init(12);
        check(&format!("cpc {mode:?}"), &p, |ctx| m.loss(ctx, &utts));
    }
}

#[test]
fn masked_objectives() {
    let ds = tiny_data(6);
    let x = &ds.utterances[0].frames;
    let mask = MaskSpec {
        n_time_masks: 1,
        max_time_width: 3,
        n_channel_masks: 1,
        max_channel_width: 2,
        seed: 0,
    };
    for objective in [
        MaskedObjective::Bert,
        MaskedObjective::BertHalf,
        MaskedObjective::Bicpc,
        MaskedObjective::BicpcHalf,
        MaskedObjective::MvMae,
        MaskedObjective::MvContrast,
        MaskedObjective::CrossviewBert,
    ] {
        let m = MaskedModel::new(MaskedPretrainConfig {
            input_dim: ds.dim(),
            hidden: 3,
            layers: 1,
            dec_hidden: vec![3],
            objective,
            mask: mask.clone(),
            alpha: 0.5,
            negatives: 2,
        })
        .unwrap();
        let p = m.init(13);
        check(&format!("{objective:?}"), &p, |ctx| m.loss(ctx, x));
    }
}

#[test]
fn recognisers_and_ctc() {
    let lat = randn(5, 4, 14);
    let err = gradcheck(
        |g, z| {
            let lp = g.log_softmax(z);
            ctc_loss_node(g, lp, &[1, 2, 2]).unwrap()
        },
        &lat,
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "ctc lattice: {err:.3e}");

    let ds = tiny_data(7);
    let utts: Vec<&Utterance> = ds.utterances.iter().take(2).collect();
    for (head, pyramid, lin) in [
        (Supervision::Ctc, vec![false, true], 1),
        (Supervision::Framewise, vec![], 0),
    ] {
        let r = Recognizer::new(RecognizerConfig {
            input_dim: ds.dim(),
            hidden: 3,
            layers: 2,
            vocab: ds.vocab,
            head,
            pyramid,
            lin_layers: lin,
        })
        .unwrap();
        let p = r.init(15);
        check(&format!("recogniser {head:?}"), &p, |ctx| r.batch_loss(ctx, &utts));
    }

    let pair = SharedTopPair::new([ds.dim(), ds.dim()], 3, 1, [ds.vocab, ds.vocab]).unwrap();
    let p = pair.init(16);
    check("shared top pair", &p, |ctx| pair.loss(ctx, 1, utts[0]));

    let mt = FfMultitask::new(
        FfConfig {
            input_dim: 3 * ds.dim(),
            hidden: vec![4],
            latent: 2,
            variant: FfVariant::Vae { beta: 1.0 },
            activation: Activation::Tanh,
            samples: 1,
        },
        3,
        3,
        1,
        ds.vocab,
    )
    .unwrap();
    let p = mt.init(17);
    check("feedforward multitask", &p, |ctx| mt.loss(ctx, &utts, 0.5));
}
