//! Self-checks runnable from the command line: gradients against central
//! differences, closed forms against brute force, and exact identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use seqrep::ctc::{ctc_loss, ctc_loss_node, ctc_oracle, min_frames, CtcInstance};
use seqrep::dataio::{gen_mask, gen_synthetic, Dataset, MaskMatrix, MaskSpec, SynthConfig, Utterance};
use seqrep::distributions::{
    kl_diag_diag, kl_diag_rows, kl_standard_rows, kl_to_standard, reparam_sample, DiagGaussian, PriorStore,
};
use seqrep::ffmodels::{FfConfig, FfModel, FfVariant};
use seqrep::graph::{gradcheck, log_softmax_rows, Graph};
use seqrep::multiview::{
    prior_updated_loss, window_mixture_prior_kl, CrossDomain, CrossDomainConfig, PairedBatch, PriorBase, Sharing,
    SimilarityLoss, Vcca, Vccap, VccapConfig,
};
use seqrep::nn::{gradcheck_params, Activation, Ctx};
use seqrep::pretrain::{infonce, lin_adapt, MaskedModel, MaskedObjective, MaskedPretrainConfig};
use seqrep::recognizer::{Recognizer, RecognizerConfig};
use seqrep::recrep::{AuxMode, Supervision};
use seqrep::tasks::{ModelSpec, TaskOptions};
use seqrep::Tensor;

use crate::config::{DataShape, ModelKind, ModelSection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Gradcheck,
    Oracles,
    Identities,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            passed: value <= limit,
            detail: format!("{value:.3e} (limit {limit:.0e})"),
        }
    }

    fn exact(name: impl Into<String>, holds: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: holds,
            detail,
        }
    }

    fn error(name: impl Into<String>, e: impl std::fmt::Display) -> Self {
        Check {
            name: name.into(),
            passed: false,
            detail: format!("error: {e}"),
        }
    }
}

pub fn run_suite(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Gradcheck => gradients(),
        Suite::Oracles => oracles(),
        Suite::Identities => identities(),
        Suite::All => {
            let mut v = gradients();
            v.extend(oracles());
            v.extend(identities());
            v
        }
    }
}

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;

fn tiny_data(seed: u64, n: usize) -> Dataset {
    let cfg = SynthConfig {
        n_states: 3,
        dim: 4,
        min_segment: 2,
        max_segment: 3,
        n_utterances: n,
        min_len: 8,
        max_len: 10,
        view2_dim: 3,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, seed).expect("fixed synthetic config is valid")
}

fn tiny_section(kind: ModelKind) -> ModelSection {
    ModelSection {
        kind,
        hidden: 3,
        layers: 2,
        latent: 2,
        dec_hidden: vec![3],
        private_dim: 1,
        beta: 0.7,
        samples: 2,
        steps: 2,
        negatives: 2,
        label_window: 3,
        alpha1: 0.3,
        alpha2: 0.3,
        mask: MaskSpec {
            n_time_masks: 1,
            max_time_width: 3,
            n_channel_masks: 1,
            max_channel_width: 2,
            seed: 0,
        },
        ..ModelSection::default()
    }
}

/// Gradient check of a model's training loss on one small batch, with and
/// (where the model supports it) without a stored prior.
fn check_spec(name: &str, spec: &ModelSpec, train: &Dataset, unlabeled: Option<&Dataset>) -> Vec<Check> {
    let run = || -> seqrep::Result<Vec<(String, f64)>> {
        let opts = TaskOptions { unlabeled_per_batch: 1 };
        let task = spec.task(train, unlabeled, train, opts)?;
        let params = spec.init(3)?;
        let batch: Vec<usize> = (0..task.train_len().min(4)).collect();
        let mut out = vec![(
            name.to_string(),
            gradcheck_params(&params, 17, GRAD_EPS, 4, |ctx| task.batch_loss(ctx, &batch, None))?,
        )];
        if let Some(store) = task.snapshot_priors(&spec.init(4)?, 1)? {
            let err = gradcheck_params(&params, 17, GRAD_EPS, 4, |ctx| task.batch_loss(ctx, &batch, Some(&store)))?;
            out.push((format!("{name} with updated prior"), err));
        }
        Ok(out)
    };
    match run() {
        Ok(v) => v.into_iter().map(|(n, e)| Check::bound(format!("grad {n}"), e, GRAD_TOL)).collect(),
        Err(e) => vec![Check::error(format!("grad {name}"), e)],
    }
}

fn gradients() -> Vec<Check> {
    let ds = tiny_data(1, 3);
    let shape = DataShape {
        dim: ds.dim(),
        vocab: ds.vocab,
        view2_dim: 3,
    };
    let mut checks = Vec::new();
    let kinds = [
        ModelKind::Ae,
        ModelKind::Dae,
        ModelKind::DaeGaussian,
        ModelKind::Nae,
        ModelKind::Vae,
        ModelKind::DropoutBottleneck,
        ModelKind::DropoutLayerwise,
        ModelKind::Vcca,
        ModelKind::Vccap,
        ModelKind::Recrep,
        ModelKind::RecrepPyramid,
        ModelKind::Fb,
        ModelKind::Cpc,
        ModelKind::Bert,
        ModelKind::BertHalf,
        ModelKind::Bicpc,
        ModelKind::BicpcHalf,
        ModelKind::MvMae,
        ModelKind::MvContrast,
        ModelKind::CrossviewBert,
        ModelKind::LabelEmbed,
        ModelKind::Recognizer,
    ];
    for kind in kinds {
        let section = tiny_section(kind);
        checks.extend(check_spec(&format!("{kind:?}"), &section.spec(shape), &ds, None));
    }

    let mut variants: Vec<(String, ModelSection)> = Vec::new();
    for head in [Supervision::Ctc] {
        variants.push((format!("Recognizer {head:?}"), ModelSection { head, ..tiny_section(ModelKind::Recognizer) }));
        variants.push((format!("RecrepPyramid {head:?}"), ModelSection { head, ..tiny_section(ModelKind::RecrepPyramid) }));
    }
    for aux in [AuxMode::Flat, AuxMode::Hierarchical] {
        variants.push((
            format!("Recrep aux {aux:?}"),
            ModelSection { aux, aux_dim: 2, ..tiny_section(ModelKind::Recrep) },
        ));
    }
    variants.push(("Recrep kappa 0.5".into(), ModelSection { kappa: 0.5, ..tiny_section(ModelKind::Recrep) }));
    for (name, similarity) in [
        ("cosine", SimilarityLoss::Cosine),
        ("contrastive", SimilarityLoss::Contrastive { margin: 0.5, negatives: 2 }),
        ("cca", SimilarityLoss::Cca { rx: 1e-3, ry: 1e-3, lambda: 0.1 }),
    ] {
        variants.push((
            format!("LabelEmbed {name}"),
            ModelSection { similarity, ..tiny_section(ModelKind::LabelEmbed) },
        ));
    }
    for (name, section) in variants {
        checks.extend(check_spec(&name, &section.spec(shape), &ds, None));
    }

    let unl = tiny_data(2, 2);
    let semi = tiny_section(ModelKind::RecrepPyramid).spec(shape);
    checks.extend(check_spec("RecrepPyramid semi-supervised", &semi, &ds, Some(&unl)));

    checks.extend(cross_domain_gradients(&ds));
    checks.extend(kl_gradients());
    checks
}

fn cross_domain_gradients(ds: &Dataset) -> Vec<Check> {
    let b = tiny_batch();
    let b = b.rows(&(0..10).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tgt = randn(7, b.x.cols(), &mut rng);
    let utts: Vec<&Utterance> = ds.utterances.iter().take(2).collect();
    let mut out = Vec::new();
    for (label, sharing) in [("full", Sharing::Full), ("partial", Sharing::Partial { split: 1 })] {
        let run = || -> seqrep::Result<Vec<(String, f64)>> {
            let m = CrossDomain::new(CrossDomainConfig {
                vccap: VccapConfig { hidden: vec![5, 4], d_z: 2, ..vccap_config(&b, 1) },
                d_ht: 2,
                sharing,
            })?
            .with_recognizer(3, 1, ds.vocab);
            let p = m.init(6);
            let g = |f: &dyn Fn(&mut Ctx) -> seqrep::Result<seqrep::graph::Var>| gradcheck_params(&p, 17, GRAD_EPS, 4, f);
            Ok(vec![
                (format!("vaep, {label} sharing"), g(&|ctx| m.vaep_loss(ctx, &tgt))?),
                (format!("vccap + vaep, {label} sharing"), g(&|ctx| m.loss(ctx, &b, &tgt, 0.4))?),
                (
                    format!("cross-domain multitask, {label} sharing"),
                    g(&|ctx| m.multitask_loss(ctx, &b, &utts, ds.vocab, 0.6, 0.4))?,
                ),
            ])
        };
        match run() {
            Ok(v) => out.extend(v.into_iter().map(|(n, e)| Check::bound(format!("grad {n}"), e, GRAD_TOL))),
            Err(e) => out.push(Check::error(format!("grad cross-domain, {label} sharing"), e)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lat = randn(5, 4, &mut rng);
    let ctc = gradcheck(
        |g, z| {
            let lp = g.log_softmax(z);
            ctc_loss_node(g, lp, &[1, 2, 2]).expect("five frames fit three symbols")
        },
        &lat,
        GRAD_EPS,
    );
    out.push(match ctc {
        Ok(e) => Check::bound("grad ctc lattice", e, GRAD_TOL),
        Err(e) => Check::error("grad ctc lattice", e),
    });
    out
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}

fn kl_gradients() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu = randn(3, 2, &mut rng);
    let lv = randn(3, 2, &mut rng);
    let (pm, pl) = (randn(3, 2, &mut rng), randn(3, 2, &mut rng));
    let mut out = Vec::new();
    let cases: [(&str, Box<dyn Fn(&mut Graph, seqrep::graph::Var) -> seqrep::graph::Var>, &Tensor); 4] = [
        (
            "kl to standard wrt mean",
            Box::new(|g: &mut Graph, x| {
                let l = g.constant(lv.clone());
                let k = kl_standard_rows(g, x, l);
                g.sum(k)
            }),
            &mu,
        ),
        (
            "kl to standard wrt log-variance",
            Box::new(|g: &mut Graph, x| {
                let m = g.constant(mu.clone());
                let k = kl_standard_rows(g, m, x);
                g.sum(k)
            }),
            &lv,
        ),
        (
            "kl between diagonals wrt mean",
            Box::new(|g: &mut Graph, x| {
                let l = g.constant(lv.clone());
                let k = kl_diag_rows(g, x, l, &pm, &pl);
                g.sum(k)
            }),
            &mu,
        ),
        (
            "kl between diagonals wrt log-variance",
            Box::new(|g: &mut Graph, x| {
                let m = g.constant(mu.clone());
                let k = kl_diag_rows(g, m, x, &pm, &pl);
                g.sum(k)
            }),
            &lv,
        ),
    ];
    for (name, f, point) in cases {
        out.push(match gradcheck(f, point, GRAD_EPS) {
            Ok(e) => Check::bound(format!("grad {name}"), e, GRAD_TOL),
            Err(e) => Check::error(format!("grad {name}"), e),
        });
    }
    out
}

fn random_gaussian(d: usize, rng: &mut ChaCha8Rng) -> DiagGaussian {
    let mu = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let lv = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    DiagGaussian::new(mu, lv).expect("finite parameters")
}

/// Monte Carlo `KL(q || p)` with its standard error.
fn mc_kl(q: &DiagGaussian, p: &DiagGaussian, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let sd: Vec<f64> = q.variance().iter().map(|v| v.sqrt()).collect();
    let (mut s, mut s2) = (0.0, 0.0);
    let mut x = vec![0.0; q.dim()];
    for _ in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            *xi = q.mu[i] + sd[i] * e;
        }
        let v = q.log_density(&x) - p.log_density(&x);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

fn oracles() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut worst = 0.0_f64;
    let mut failures = Vec::new();
    for i in 0..60 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(1..=3);
        let lat = log_softmax_rows(&randn(t, v + 1, &mut rng));
        let len = rng.random_range(0..=t);
        let tr: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let inst = match CtcInstance::new(lat, tr.clone()) {
            Ok(x) => x,
            Err(e) => {
                failures.push(format!("instance {i}: {e}"));
                continue;
            }
        };
        let brute = ctc_oracle(&inst);
        match (ctc_loss(&inst), brute) {
            (Ok(a), Ok(b)) => worst = worst.max((a - b).abs() / b.abs().max(1.0)),
            (Err(seqrep::Error::Infeasible { .. }), Ok(b)) if b.is_infinite() && min_frames(&tr) > t => {}
            (a, b) => failures.push(format!("instance {i}: {a:?} vs {b:?}")),
        }
    }
    checks.push(if failures.is_empty() {
        Check::bound("ctc forward-backward vs path enumeration", worst, 1e-9)
    } else {
        Check::error("ctc forward-backward vs path enumeration", failures.join("; "))
    });

    let n = 100_000;
    for i in 0..6 {
        let d = 1 + i % 3;
        let q = random_gaussian(d, &mut rng);
        let p = random_gaussian(d, &mut rng);
        let std = DiagGaussian::standard(d);
        let (mc0, se0) = mc_kl(&q, &std, n, &mut rng);
        let cf0 = kl_to_standard(&q);
        checks.push(mc_check(format!("kl to standard vs monte carlo #{i}"), cf0, mc0, se0));
        match kl_diag_diag(&q, &p) {
            Ok(cf) => {
                let (mc, se) = mc_kl(&q, &p, n, &mut rng);
                checks.push(mc_check(format!("kl between diagonals vs monte carlo #{i}"), cf, mc, se));
            }
            Err(e) => checks.push(Check::error(format!("kl between diagonals #{i}"), e)),
        }
    }

    let q = random_gaussian(2, &mut rng);
    let p = random_gaussian(2, &mut rng);
    checks.push(match (window_mixture_prior_kl(&q, &[p.clone()], 20_000, &mut rng), kl_diag_diag(&q, &p)) {
        (Ok((est, se)), Ok(cf)) => mc_check("single-neighbour window prior vs closed form".into(), cf, est, se),
        (Err(e), _) | (_, Err(e)) => Check::error("single-neighbour window prior", e),
    });
    checks
}

fn mc_check(name: String, closed: f64, mc: f64, se: f64) -> Check {
    let gap = (closed - mc).abs();
    let ok = gap <= 0.01 * closed.abs() || gap <= 3.0 * se;
    Check::exact(name, ok, format!("closed {closed:.5}, estimate {mc:.5} +- {se:.1e}"))
}

fn tiny_batch() -> PairedBatch {
    let ds = tiny_data(21, 3);
    let utts: Vec<&Utterance> = ds.utterances.iter().collect();
    PairedBatch::from_utterances(&utts, 3).expect("tiny data has a second view")
}

fn identities() -> Vec<Check> {
    let run: [(&str, fn() -> seqrep::Result<(bool, String)>); 8] = [
        ("vae = nae + variance part of kl", vae_nae),
        ("vccap without privates = vcca", vccap_vcca),
        ("standard-normal store = base loss", standard_store),
        ("gaussian dropout = reparameterised sample", gaussian_dropout),
        ("infonce of equal scores = log(n+1)", infonce_constant),
        ("masked reconstruction, nothing masked = 0", masked_nothing),
        ("consistency of identical masks = 0", identical_masks),
        ("fresh input layer leaves encoder bit-equal", fresh_lin),
    ];
    run.into_iter()
        .map(|(name, f)| match f() {
            Ok((ok, detail)) => Check::exact(name, ok, detail),
            Err(e) => Check::error(name, e),
        })
        .collect()
}

fn within(diff: f64, tol: f64) -> (bool, String) {
    (diff <= tol, format!("max gap {diff:.2e}"))
}

fn vae_nae() -> seqrep::Result<(bool, String)> {
    let b = tiny_batch();
    let beta = 0.37;
    let make = |variant| {
        FfModel::new(FfConfig {
            input_dim: b.x.cols(),
            hidden: vec![6, 5],
            latent: 3,
            variant,
            activation: Activation::Tanh,
            samples: 1,
        })
    };
    let vae = make(FfVariant::Vae { beta })?;
    let nae = make(FfVariant::Nae { beta })?;
    let params = vae.init(4);
    let mut worst = 0.0_f64;
    for i in 0..b.len() {
        let x = b.x.slice_rows(i, 1);
        let mut c1 = Ctx::new(&params, 9, true);
        let lv = vae.loss(&mut c1, &x)?;
        let mut c2 = Ctx::new(&params, 9, true);
        let ln = nae.loss(&mut c2, &x)?;
        let logvar = ln.logvar.expect("nae has a variance");
        let extra: f64 = c2
            .value(logvar)
            .data()
            .iter()
            .map(|lv| {
                let s = (lv / 2.0).exp();
                s * s / 2.0 - s.ln() - 0.5
            })
            .sum();
        worst = worst.max((c1.value(lv.loss).item() - (c2.value(ln.loss).item() + beta * extra)).abs());
    }
    Ok(within(worst, 1e-12))
}

fn vccap_config(b: &PairedBatch, private: usize) -> VccapConfig {
    VccapConfig {
        dx: b.x.cols(),
        dy: b.y.cols(),
        hidden: vec![5, 4],
        d_z: 3,
        d_h1: private,
        d_h2: private,
        beta: 0.6,
        activation: Activation::Tanh,
        split: 1,
    }
}

fn vccap_vcca() -> seqrep::Result<(bool, String)> {
    let b = tiny_batch();
    let cfg = vccap_config(&b, 0);
    let p = Vccap::new(cfg.clone())?.init(5);
    let mut c1 = Ctx::new(&p, 3, true);
    let a = Vcca::new(cfg.clone())?.loss(&mut c1, &b, None)?.loss;
    let mut c2 = Ctx::new(&p, 3, true);
    let v = Vccap::new(cfg)?.loss(&mut c2, &b, None)?.loss;
    Ok(within((c1.value(a).item() - c2.value(v).item()).abs(), 1e-12))
}

fn standard_store() -> seqrep::Result<(bool, String)> {
    let b = tiny_batch();
    let cfg = VccapConfig { split: 0, ..vccap_config(&b, 1) };
    let m = Vccap::new(cfg.clone())?;
    let p = m.init(6);
    let mut store = PriorStore::new(0, cfg.posterior_dim());
    for (id, t) in &b.keys {
        store.insert(id, *t, DiagGaussian::standard(cfg.posterior_dim()))?;
    }
    let mut c1 = Ctx::new(&p, 1, true);
    let base = PriorBase::Vccap(&m).loss(&mut c1, &b, None)?;
    let mut c2 = Ctx::new(&p, 1, true);
    let upd = prior_updated_loss(&mut c2, PriorBase::Vccap(&m), &b, &store)?;
    Ok(within((c1.value(base).item() - c2.value(upd).item()).abs(), 1e-12))
}

fn gaussian_dropout() -> seqrep::Result<(bool, String)> {
    let gamma = 0.45;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mu = randn(1, 12, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(mu.clone());
    let mut draw = ChaCha8Rng::seed_from_u64(31);
    let y = g.dropout_gaussian(x, gamma, &mut draw);
    let mut replay = ChaCha8Rng::seed_from_u64(31);
    let mut worst_ulps = 0.0_f64;
    for (i, &m) in mu.data().iter().enumerate() {
        let e: f64 = StandardNormal.sample(&mut replay);
        let dropped = g.value(y).data()[i];
        let q = DiagGaussian::new(vec![m], vec![((gamma * m) * (gamma * m)).ln()])?;
        let s = reparam_sample(&q, &[e * m.signum()], 1.0)?[0];
        let scale = dropped.abs().max(s.abs()).max(f64::MIN_POSITIVE);
        worst_ulps = worst_ulps.max((s - dropped).abs() / (f64::EPSILON * scale));
    }
    Ok((worst_ulps <= 4.0, format!("max gap {worst_ulps:.1} ulp")))
}

fn infonce_constant() -> seqrep::Result<(bool, String)> {
    let mut worst = 0.0_f64;
    for n in [1usize, 3, 7, 20] {
        let mut g = Graph::new();
        let pos = g.constant(Tensor::zeros(5, 1));
        let neg = g.constant(Tensor::zeros(5, n));
        let l = infonce(&mut g, pos, neg);
        worst = worst.max((g.value(l).item() - ((n + 1) as f64).ln()).abs());
    }
    Ok((worst == 0.0, format!("max gap {worst:e}")))
}

fn masked_model(objective: MaskedObjective, alpha: f64) -> seqrep::Result<MaskedModel> {
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
}

fn masked_nothing() -> seqrep::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = randn(7, 4, &mut rng);
    let m = masked_model(MaskedObjective::Bert, 0.5)?;
    let p = m.init(1);
    let all = MaskMatrix::all_observed(7, 4);
    let mut worst = 0.0_f64;
    for half in [false, true] {
        let mut ctx = Ctx::new(&p, 0, true);
        let l = m.masked_recon_loss(&mut ctx, &x, &all, half)?;
        worst = worst.max(ctx.value(l).item().abs());
    }
    Ok((worst == 0.0, format!("loss {worst:e}")))
}

fn identical_masks() -> seqrep::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = randn(7, 4, &mut rng);
    let m = masked_model(MaskedObjective::MvMae, 0.0)?;
    let p = m.init(2);
    let spec = MaskSpec {
        n_time_masks: 1,
        max_time_width: 2,
        n_channel_masks: 1,
        max_channel_width: 1,
        seed: 3,
    };
    let mask = gen_mask(&spec, 7, 4)?;
    let mut ctx = Ctx::new(&p, 0, true);
    let l = m.multiview_loss(&mut ctx, &x, &mask, &mask)?;
    let v = ctx.value(l).item();
    Ok((v == 0.0, format!("loss {v:e}")))
}

fn fresh_lin() -> seqrep::Result<(bool, String)> {
    let rec = Recognizer::new(RecognizerConfig {
        input_dim: 4,
        hidden: 3,
        layers: 2,
        vocab: 3,
        head: Supervision::Ctc,
        pyramid: vec![],
        lin_layers: 0,
    })?;
    let wrapped = lin_adapt(&rec)?;
    let p = rec.init(7);
    let mut pw = p.clone();
    wrapped.fill_lin(&mut pw);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = randn(6, 4, &mut rng);
    let mut c1 = Ctx::new(&p, 0, false);
    let h1 = rec.encode(&mut c1, &x)?;
    let mut c2 = Ctx::new(&pw, 0, false);
    let h2 = wrapped.encode(&mut c2, &x)?;
    let equal = c1.value(h1) == c2.value(h2);
    Ok((equal, if equal { "bit-equal".into() } else { "outputs differ".into() }))
}
