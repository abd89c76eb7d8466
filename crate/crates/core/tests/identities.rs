//! Algebraic identities that hold exactly, or to a few rounding errors.

mod common;

use common::{randn, tiny_data};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use seqrep::dataio::{MaskMatrix, MaskSpec, Utterance};
use seqrep::distributions::{kl_to_standard, reparam_sample, DiagGaussian, PriorStore};
use seqrep::ffmodels::{FfConfig, FfModel, FfVariant};
use seqrep::graph::Graph;
use seqrep::multiview::{prior_updated_loss, PairedBatch, PriorBase, Vcca, Vccap, VccapConfig};
use seqrep::nn::{Activation, Ctx, Params};
use seqrep::pretrain::{infonce, lin_adapt, MaskedModel, MaskedObjective, MaskedPretrainConfig};
use seqrep::recognizer::{Recognizer, RecognizerConfig};
use seqrep::recrep::Supervision;
use seqrep::Tensor;

fn batch() -> PairedBatch {
    let ds = tiny_data(21);
    let utts: Vec<&Utterance> = ds.utterances.iter().collect();
    PairedBatch::from_utterances(&utts, 3).unwrap()
}

fn ff(input_dim: usize, variant: FfVariant) -> FfModel {
    FfModel::new(FfConfig {
        input_dim,
        hidden: vec![6, 5],
        latent: 3,
        variant,
        activation: Activation::Tanh,
        samples: 1,
    })
    .unwrap()
}

#[test]
fn vae_is_nae_plus_variance_kl_per_datum() {
    let b = batch();
    let beta = 0.37;
    let vae = ff(b.x.cols(), FfVariant::Vae { beta });
    let nae = ff(b.x.cols(), FfVariant::Nae { beta });
    let params = vae.init(4);
    for i in 0..b.len() {
        let x = b.x.slice_rows(i, 1);
        let mut c1 = Ctx::new(&params, 9, true);
        let lv = vae.loss(&mut c1, &x).unwrap();
        let l_vae = c1.value(lv.loss).item();
        let mut c2 = Ctx::new(&params, 9, true);
        let ln = nae.loss(&mut c2, &x).unwrap();
        let l_nae = c2.value(ln.loss).item();
        let logvar = c2.value(ln.logvar.unwrap()).clone();
        let extra: f64 = logvar
            .data()
            .iter()
            .map(|lv| {
                let sigma = (lv / 2.0).exp();
                sigma * sigma / 2.0 - sigma.ln() - 0.5
            })
            .sum();
        let diff = (l_vae - (l_nae + beta * extra)).abs();
        assert!(diff <= 1e-12, "row {i}: {diff:e}");
    }
}

#[test]
fn vccap_without_private_latents_is_vcca() {
    let b = batch();
    let cfg = VccapConfig {
        dx: b.x.cols(),
        dy: b.y.cols(),
        hidden: vec![5, 4],
        d_z: 3,
        d_h1: 0,
        d_h2: 0,
        beta: 0.6,
        activation: Activation::Tanh,
        split: 1,
    };
    let p = Vccap::new(cfg.clone()).unwrap().init(5);
    let vcca = Vcca::new(cfg.clone()).unwrap();
    let vccap = Vccap::new(cfg).unwrap();
    let mut c1 = Ctx::new(&p, 3, true);
    let a = vcca.loss(&mut c1, &b, None).unwrap().loss;
    let mut c2 = Ctx::new(&p, 3, true);
    let bb = vccap.loss(&mut c2, &b, None).unwrap().loss;
    let diff = (c1.value(a).item() - c2.value(bb).item()).abs();
    assert!(diff <= 1e-12, "{diff:e}");
}

#[test]
fn standard_normal_store_leaves_loss_unchanged() {
    let b = batch();
    let cfg = VccapConfig {
        dx: b.x.cols(),
        dy: b.y.cols(),
        hidden: vec![4],
        d_z: 2,
        d_h1: 1,
        d_h2: 1,
        beta: 1.3,
        activation: Activation::Tanh,
        split: 0,
    };
    let m = Vccap::new(cfg.clone()).unwrap();
    let p = m.init(6);
    let mut store = PriorStore::new(0, cfg.posterior_dim());
    for (id, t) in &b.keys {
        store.insert(id, *t, DiagGaussian::standard(cfg.posterior_dim())).unwrap();
    }
    let mut c1 = Ctx::new(&p, 1, true);
    let base = PriorBase::Vccap(&m).loss(&mut c1, &b, None).unwrap();
    let mut c2 = Ctx::new(&p, 1, true);
    let upd = prior_updated_loss(&mut c2, PriorBase::Vccap(&m), &b, &store).unwrap();
    let diff = (c1.value(base).item() - c2.value(upd).item()).abs();
    assert!(diff <= 1e-12, "{diff:e}");
}

/// Multiplying by `delta ~ N(1, gamma^2)` is the reparameterised sample of
/// `N(mu, (gamma mu)^2)` with noise `(delta - 1) / gamma`.
#[test]
fn gaussian_dropout_is_a_reparameterised_sample() {
    let gamma = 0.45;
    let mu = randn(1, 12, 30);
    let mut g = Graph::new();
    let x = g.constant(mu.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let y = g.dropout_gaussian(x, gamma, &mut rng);
    let dropped = g.value(y).clone();

    // Same draws, replayed.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let delta: Vec<f64> = (0..12)
        .map(|_| 1.0 + gamma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let close = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(1e-300);
    for i in 0..12 {
        let m = mu.data()[i];
        assert_eq!(dropped.data()[i], m * delta[i]);
        let e = (delta[i] - 1.0) / gamma;
        assert!(close(m * delta[i], m + gamma * m * e));
        // sigma = gamma |mu|, so the noise carries the sign of mu.
        let q = DiagGaussian::new(vec![m], vec![((gamma * m) * (gamma * m)).ln()]).unwrap();
        let s = reparam_sample(&q, &[e * m.signum()], 1.0).unwrap()[0];
        assert!(close(s, m * delta[i]), "{s} vs {}", m * delta[i]);
    }
}

#[test]
fn infonce_of_constant_scores_is_log_n_plus_one() {
    for n in [1usize, 3, 7, 20] {
        let mut g = Graph::new();
        let pos = g.constant(Tensor::zeros(5, 1));
        let neg = g.constant(Tensor::zeros(5, n));
        let l = infonce(&mut g, pos, neg);
        assert_eq!(g.value(l).item(), ((n + 1) as f64).ln());
    }
}

fn masked(objective: MaskedObjective, alpha: f64) -> MaskedModel {
    MaskedModel::with_unchecked_mask(MaskedPretrainConfig {
        input_dim: 4,
        hidden: 3,
        layers: 1,
        dec_hidden: vec![3],
        objective,
        mask: MaskSpec::none(),
        alpha,
        negatives: 1,
    })
    .unwrap()
}

#[test]
fn reconstruction_with_nothing_masked_is_zero() {
    let x = randn(7, 4, 40);
    let m = masked(MaskedObjective::Bert, 0.5);
    let p = m.init(1);
    let all = MaskMatrix::all_observed(7, 4);
    for half in [false, true] {
        let mut ctx = Ctx::new(&p, 0, true);
        let l = m.masked_recon_loss(&mut ctx, &x, &all, half).unwrap();
        assert_eq!(ctx.value(l).item(), 0.0);
    }
}

#[test]
fn consistency_between_identical_masks_is_zero() {
    let x = randn(7, 4, 41);
    let m = masked(MaskedObjective::MvMae, 0.0);
    let p = m.init(2);
    let mask = seqrep::dataio::gen_mask(
        &MaskSpec {
            n_time_masks: 1,
            max_time_width: 2,
            n_channel_masks: 1,
            max_channel_width: 1,
            seed: 3,
        },
        7,
        4,
    )
    .unwrap();
    let mut ctx = Ctx::new(&p, 0, true);
    let l = m.multiview_loss(&mut ctx, &x, &mask, &mask).unwrap();
    assert_eq!(ctx.value(l).item(), 0.0);
}

#[test]
fn fresh_input_layer_leaves_encoder_output_bit_equal() {
    let rec = Recognizer::new(RecognizerConfig {
        input_dim: 4,
        hidden: 3,
        layers: 2,
        vocab: 3,
        head: Supervision::Ctc,
        pyramid: vec![],
        lin_layers: 0,
    })
    .unwrap();
    let wrapped = lin_adapt(&rec).unwrap();
    let p: Params = rec.init(7);
    let mut pw = p.clone();
    wrapped.fill_lin(&mut pw);
    let x = randn(6, 4, 42);
    let mut c1 = Ctx::new(&p, 0, false);
    let h1 = rec.encode(&mut c1, &x).unwrap();
    let mut c2 = Ctx::new(&pw, 0, false);
    let h2 = wrapped.encode(&mut c2, &x).unwrap();
    assert_eq!(c1.value(h1), c2.value(h2));
}

#[test]
fn kl_is_zero_only_at_the_standard_normal() {
    assert_eq!(kl_to_standard(&DiagGaussian::standard(4)), 0.0);
    assert!(kl_to_standard(&DiagGaussian::new(vec![0.1], vec![0.0]).unwrap()) > 0.0);
}
