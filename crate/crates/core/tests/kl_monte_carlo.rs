//! Closed-form Gaussian KL divergences against sampling estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seqrep::distributions::{kl_diag_diag, kl_to_standard, DiagGaussian};

const SAMPLES: usize = 1_000_000;

fn log_density(mu: &[f64], var: &[f64], x: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mu.len() {
        let d = x[i] - mu[i];
        s += -0.5 * ((2.0 * std::f64::consts::PI * var[i]).ln() + d * d / var[i]);
    }
    s
}

/// Mean and standard error of `log q(x) - log p(x)` for `x ~ q`.
fn mc_kl(q: (&[f64], &[f64]), p: (&[f64], &[f64]), rng: &mut ChaCha8Rng) -> (f64, f64) {
    let d = q.0.len();
    let sd: Vec<f64> = q.1.iter().map(|v| v.sqrt()).collect();
    let mut x = vec![0.0; d];
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..SAMPLES {
        for i in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            x[i] = q.0[i] + sd[i] * e;
        }
        let v = log_density(q.0, q.1, &x) - log_density(p.0, p.1, &x);
        sum += v;
        sq += v * v;
    }
    let n = SAMPLES as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mu = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let var = (0..d).map(|_| rng.random_range(0.3..2.5)).collect();
    (mu, var)
}

fn agrees(closed: f64, est: f64, se: f64) -> bool {
    (closed - est).abs() <= 0.01 * closed.abs() || (closed - est).abs() <= 3.0 * se
}

#[test]
fn twenty_gaussians_against_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let d = 1 + case % 3;
        let (mq, vq) = random_gaussian(&mut rng, d);
        let (mp, vp) = random_gaussian(&mut rng, d);
        let lq: Vec<f64> = vq.iter().map(|v: &f64| v.ln()).collect();
        let lp: Vec<f64> = vp.iter().map(|v: &f64| v.ln()).collect();
        let q = DiagGaussian::new(mq.clone(), lq).unwrap();
        let p = DiagGaussian::new(mp.clone(), lp).unwrap();

        let closed = kl_to_standard(&q);
        let (est, se) = mc_kl((&mq, &vq), (&vec![0.0; d], &vec![1.0; d]), &mut rng);
        assert!(agrees(closed, est, se), "case {case} to standard: {closed} vs {est} +- {se}");

        let closed = kl_diag_diag(&q, &p).unwrap();
        let (est, se) = mc_kl((&mq, &vq), (&mp, &vp), &mut rng);
        assert!(agrees(closed, est, se), "case {case} diag-diag: {closed} vs {est} +- {se}");
    }
}
