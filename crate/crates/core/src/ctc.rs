//! Connectionist temporal classification.
//!
//! A lattice is a `T x (V+1)` matrix of per-frame log-probabilities whose
//! column 0 is the blank. Transcripts use symbols `0..V`, and symbol `l`
//! lives in column `l + 1`.
//!
//! The loss runs the usual forward-backward recursion over the transcript
//! interleaved with blanks, in log space. Forward variables include the
//! emission at their own frame and backward variables exclude it, so the
//! state occupancy at `(t, s)` is `exp(alpha + beta - log Z)`. The gradient
//! of the negative log-likelihood with respect to a lattice entry is minus
//! the total occupancy of that column at that frame.

use crate::error::{Error, Result};
use crate::graph::{logsumexp, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CtcInstance {
    pub lattice: Tensor,
    pub transcript: Vec<usize>,
}

impl CtcInstance {
    pub fn new(lattice: Tensor, transcript: Vec<usize>) -> Result<Self> {
        let inst = CtcInstance { lattice, transcript };
        inst.validate()?;
        Ok(inst)
    }

    pub fn vocab(&self) -> usize {
        self.lattice.cols() - 1
    }

    /// Rows must be normalised log-distributions and symbols in range.
    pub fn validate(&self) -> Result<()> {
        if self.lattice.cols() < 2 || self.lattice.rows() == 0 {
            return Err(Error::Shape("a lattice needs at least one frame and one non-blank column".into()));
        }
        for t in 0..self.lattice.rows() {
            let l = logsumexp(self.lattice.row_slice(t));
            if (l).abs() > 1e-9 {
                return Err(Error::Format(format!("lattice row {t} is not normalised (logsumexp {l})")));
            }
        }
        check_symbols(&self.transcript, self.vocab())
    }
}

fn check_symbols(transcript: &[usize], vocab: usize) -> Result<()> {
    if let Some(&s) = transcript.iter().find(|&&s| s >= vocab) {
        return Err(Error::Format(format!("transcript symbol {s} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// Fewest frames that can emit `transcript`: one per symbol plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(transcript: &[usize]) -> usize {
    transcript.len() + transcript.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood and its gradient with respect to the lattice.
pub fn ctc_nll(lattice: &Tensor, transcript: &[usize]) -> Result<(f64, Tensor)> {
    let (t_len, cols) = (lattice.rows(), lattice.cols());
    check_symbols(transcript, cols.saturating_sub(1))?;
    let needed = min_frames(transcript);
    if needed > t_len {
        return Err(Error::Infeasible {
            needed,
            frames: t_len,
        });
    }
    let ninf = f64::NEG_INFINITY;
    let ext: Vec<usize> = std::iter::once(0)
        .chain(transcript.iter().flat_map(|&l| [l + 1, 0]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| lattice.get(t, ext[s]);

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = logsumexp(&terms) + lp(t, s);
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_z = if s_len > 1 {
        logsumexp(&[last[s_len - 1], last[s_len - 2]])
    } else {
        last[0]
    };
    if !log_z.is_finite() {
        return Err(Error::NonFinite { node: 0, op: "ctc" });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
            let mut terms = [next(s), ninf, ninf];
            if s + 1 < s_len {
                terms[1] = next(s + 1);
            }
            if s + 2 < s_len && skip(s + 2) {
                terms[2] = next(s + 2);
            }
            beta[t * s_len + s] = logsumexp(&terms);
        }
    }

    let mut grad = Tensor::zeros(t_len, cols);
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a > ninf {
                let cur = grad.get(t, ext[s]);
                grad.set(t, ext[s], cur - (a - log_z).exp());
            }
        }
    }
    Ok((-log_z, grad))
}

pub fn ctc_loss(inst: &CtcInstance) -> Result<f64> {
    ctc_nll(&inst.lattice, &inst.transcript).map(|(v, _)| v)
}

/// CTC loss as a graph node on a log-probability lattice node.
pub fn ctc_loss_node(g: &mut Graph, log_probs: Var, transcript: &[usize]) -> Result<Var> {
    let (value, grad) = ctc_nll(g.value(log_probs), transcript)?;
    Ok(g.custom("ctc", &[log_probs], Tensor::scalar(value), move |up| {
        vec![grad.map(|v| v * up.item())]
    }))
}

/// Merges repeats, then removes blanks. Input and output use lattice
/// columns shifted down by one (so the blank is gone from the output).
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c - 1);
        }
        prev = Some(c);
    }
    out
}

/// Exhaustive enumeration of every frame-level path. Returns `+inf` when
/// no path produces the transcript.
pub fn ctc_oracle(inst: &CtcInstance) -> Result<f64> {
    let (t_len, cols) = (inst.lattice.rows(), inst.lattice.cols());
    let paths = (cols as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if paths > 1_000_000 {
        return Err(Error::TooLarge(paths));
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    for mut code in 0..paths as usize {
        for p in path.iter_mut() {
            *p = code % cols;
            code /= cols;
        }
        if collapse_path(&path) == inst.transcript {
            let lp: f64 = path.iter().enumerate().map(|(t, &c)| inst.lattice.get(t, c)).sum();
            total += lp.exp();
        }
    }
    Ok(-total.ln())
}

/// Frame-wise argmax, repeats merged, blanks removed.
pub fn greedy_decode(lattice: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.rows())
        .map(|t| {
            let row = lattice.row_slice(t);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    collapse_path(&path)
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Config("error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_frame() {
        let l = lattice(&[&[0.2, 0.5, 0.3]]);
        let v = ctc_loss(&CtcInstance::new(l, vec![0]).unwrap()).unwrap();
        assert!((v + 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let (b1, a1, b2, a2) = (0.4, 0.6, 0.3, 0.7);
        let l = lattice(&[&[b1, a1], &[b2, a2]]);
        let v = ctc_loss(&CtcInstance::new(l, vec![0]).unwrap()).unwrap();
        let want = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_an_error() {
        let l = lattice(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let inst = CtcInstance::new(l, vec![0, 0]).unwrap();
        assert!(matches!(ctc_loss(&inst), Err(Error::Infeasible { needed: 3, frames: 2 })));
        assert_eq!(ctc_oracle(&inst).unwrap(), f64::INFINITY);
    }

    #[test]
    fn empty_transcript_is_all_blank() {
        let l = lattice(&[&[0.4, 0.6], &[0.3, 0.7]]);
        let inst = CtcInstance::new(l, vec![]).unwrap();
        let want = -(0.4f64 * 0.3).ln();
        assert!((ctc_loss(&inst).unwrap() - want).abs() < 1e-12);
        assert!((ctc_oracle(&inst).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let one_hot = |cols: &[usize]| {
            let rows: Vec<Vec<f64>> = cols
                .iter()
                .map(|&c| (0..3).map(|j| if j == c { 0.0 } else { -10.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(greedy_decode(&one_hot(&[1, 1, 0, 2])), vec![0, 1]);
        assert_eq!(greedy_decode(&one_hot(&[0, 0])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot(&[1, 0, 1])), vec![0, 0]);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(error_rate(&[], &[1, 2]).unwrap(), 1.0);
        assert_eq!(error_rate(&[0, 1, 2], &[0, 2]).unwrap(), 0.5);
        assert!(error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let l = Tensor::full(13, 3, (1.0f64 / 3.0).ln());
        let inst = CtcInstance::new(l, vec![0]).unwrap();
        assert!(matches!(ctc_oracle(&inst), Err(Error::TooLarge(_))));
    }
}
