//! CTC forward-backward against brute-force alignment sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrep::ctc::{ctc_loss, ctc_oracle, min_frames, CtcInstance};
use seqrep::graph::log_softmax_rows;
use seqrep::Tensor;

/// Probability of `transcript` by recursion over frames, tracking the
/// collapsed prefix emitted so far and the last frame symbol.
fn brute_force(lat: &Tensor, transcript: &[usize]) -> f64 {
    fn go(lat: &Tensor, tr: &[usize], t: usize, prefix: &mut Vec<usize>, last: Option<usize>, lp: f64) -> f64 {
        if !tr.starts_with(prefix) {
            return 0.0;
        }
        if t == lat.rows() {
            return if prefix.as_slice() == tr { lp.exp() } else { 0.0 };
        }
        let mut total = 0.0;
        for c in 0..lat.cols() {
            let emits = c != 0 && Some(c) != last;
            if emits {
                prefix.push(c - 1);
            }
            total += go(lat, tr, t + 1, prefix, Some(c), lp + lat.get(t, c));
            if emits {
                prefix.pop();
            }
        }
        total
    }
    go(lat, transcript, 0, &mut Vec::new(), None, 0.0)
}

fn random_lattice(rng: &mut ChaCha8Rng, t: usize, cols: usize) -> Tensor {
    let raw: Vec<f64> = (0..t * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
    log_softmax_rows(&Tensor::new(t, cols, raw).unwrap())
}

#[test]
fn two_hundred_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut done = 0;
    while done < 200 {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(1..=3);
        let n = rng.random_range(0..=t);
        let tr: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        if min_frames(&tr) > t {
            continue;
        }
        let inst = CtcInstance::new(random_lattice(&mut rng, t, v + 1), tr.clone()).unwrap();
        let loss = ctc_loss(&inst).unwrap();
        let reference = -brute_force(&inst.lattice, &tr).ln();
        assert!((loss - reference).abs() <= 1e-9, "T={t} {tr:?}: {loss} vs {reference}");
        let enumerated = ctc_oracle(&inst).unwrap();
        assert!((loss - enumerated).abs() <= 1e-9);
        done += 1;
    }
}

fn all_transcripts(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for s in 0..v {
                let mut q: Vec<usize> = p.clone();
                q.push(s);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn probabilities_of_all_transcripts_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in 1..=4 {
        for v in 1..=2 {
            let lat = random_lattice(&mut rng, t, v + 1);
            let total: f64 = all_transcripts(v, t)
                .into_iter()
                .filter(|tr| min_frames(tr) <= t)
                .map(|tr| (-ctc_loss(&CtcInstance::new(lat.clone(), tr).unwrap()).unwrap()).exp())
                .sum();
            assert!((total - 1.0).abs() <= 1e-6, "T={t} V={v}: {total}");
        }
    }
}

#[test]
fn infeasible_transcript_is_an_error() {
    let lat = log_softmax_rows(&Tensor::zeros(2, 3));
    let inst = CtcInstance::new(lat, vec![1, 1]).unwrap();
    assert!(ctc_loss(&inst).is_err());
}
