//! Downstream recognisers: a bidirectional recurrent encoder (`enc`) and a
//! linear output layer (`out`), trained with CTC or framewise
//! cross-entropy. Optional identity-initialised input layers (`lin.{i}`)
//! sit in front of the encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_node, ctc_nll, edit_distance, greedy_decode};
use crate::dataio::Utterance;
use crate::error::{Error, Result};
use crate::graph::{log_softmax_rows, Var};
use crate::nn::{mean_of, Ctx, Linear, Params, RecurrentStack};
use crate::recrep::Supervision;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognizerConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub vocab: usize,
    #[serde(default)]
    pub head: Supervision,
    #[serde(default)]
    pub pyramid: Vec<bool>,
    /// Identity-initialised linear layers in front of the encoder.
    #[serde(default)]
    pub lin_layers: usize,
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.vocab == 0 {
            return Err(Error::Config("recogniser widths, depth and vocabulary must be positive".into()));
        }
        if !self.pyramid.is_empty() && self.pyramid.len() != self.layers {
            return Err(Error::Config(format!(
                "{} pyramid flags given for {} layers",
                self.pyramid.len(),
                self.layers
            )));
        }
        if self.head == Supervision::Framewise && self.pyramid.iter().any(|p| *p) {
            return Err(Error::Config("framewise recognisers cannot subsample time".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    pub cfg: RecognizerConfig,
    pub lin: Vec<Linear>,
    pub enc: RecurrentStack,
    pub out: Linear,
}

impl Recognizer {
    pub fn new(cfg: RecognizerConfig) -> Result<Self> {
        cfg.validate()?;
        let pyramid = if cfg.pyramid.is_empty() {
            vec![false; cfg.layers]
        } else {
            cfg.pyramid.clone()
        };
        let enc = RecurrentStack::new("enc", cfg.input_dim, cfg.hidden, cfg.layers, true).with_pyramid(pyramid);
        let classes = match cfg.head {
            Supervision::Ctc => cfg.vocab + 1,
            Supervision::Framewise => cfg.vocab,
        };
        let lin = (0..cfg.lin_layers)
            .map(|i| Linear::new(format!("lin.{i}"), cfg.input_dim, cfg.input_dim))
            .collect();
        Ok(Recognizer {
            out: Linear::new("out", enc.dout(), classes),
            lin,
            enc,
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.enc.init(&mut p, &mut rng);
        self.out.init(&mut p, &mut rng);
        for l in &self.lin {
            l.init_identity(&mut p);
        }
        p
    }

    /// Identity-initialises any input layer missing from `params`.
    pub fn fill_lin(&self, params: &mut Params) {
        for l in &self.lin {
            if !params.contains(&format!("{}.w", l.name)) {
                l.init_identity(params);
            }
        }
    }

    /// Encoder output before the output layer.
    pub fn encode(&self, ctx: &mut Ctx, frames: &Tensor) -> Result<Var> {
        if frames.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "recogniser input",
                expected: self.cfg.input_dim,
                got: frames.cols(),
            });
        }
        if frames.rows() < self.enc.stride() {
            return Err(Error::Shape(format!(
                "{} frames is shorter than the encoder stride {}",
                frames.rows(),
                self.enc.stride()
            )));
        }
        let mut x = ctx.input(frames.clone());
        for l in &self.lin {
            x = l.forward(ctx, x);
        }
        Ok(self.enc.forward(ctx, x))
    }

    pub fn log_probs(&self, ctx: &mut Ctx, frames: &Tensor) -> Result<Var> {
        let h = self.encode(ctx, frames)?;
        let logits = self.out.forward(ctx, h);
        Ok(ctx.g.log_softmax(logits))
    }

    /// CTC negative log-likelihood of the transcript, or mean framewise
    /// cross-entropy.
    pub fn loss(&self, ctx: &mut Ctx, u: &Utterance) -> Result<Var> {
        let lp = self.log_probs(ctx, &u.frames)?;
        match self.cfg.head {
            Supervision::Ctc => ctc_loss_node(&mut ctx.g, lp, transcript_of(u)?),
            Supervision::Framewise => {
                let labels = labels_of(u)?;
                let at: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
                let picked = ctx.g.gather(lp, &at);
                let m = ctx.g.mean(picked);
                Ok(ctx.g.neg(m))
            }
        }
    }

    pub fn batch_loss(&self, ctx: &mut Ctx, utts: &[&Utterance]) -> Result<Var> {
        if utts.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let terms = utts.iter().map(|u| self.loss(ctx, u)).collect::<Result<Vec<_>>>()?;
        Ok(mean_of(&mut ctx.g, &terms))
    }

    /// Log-probability lattice in evaluation mode.
    pub fn lattice(&self, params: &Params, frames: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(params, 0, false);
        let h = self.encode(&mut ctx, frames)?;
        let logits = self.out.forward(&mut ctx, h);
        Ok(log_softmax_rows(ctx.value(logits)))
    }

    pub fn evaluate(&self, params: &Params, utts: &[&Utterance]) -> Result<EvalReport> {
        let rows = utts
            .iter()
            .map(|u| {
                let lat = self.lattice(params, &u.frames)?;
                evaluate_lattice(&u.id, &lat, u, self.cfg.head)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::from_rows(rows))
    }
}

fn labels_of(u: &Utterance) -> Result<&[usize]> {
    u.labels
        .as_deref()
        .ok_or_else(|| Error::Config(format!("utterance `{}` has no frame labels", u.id)))
}

fn transcript_of(u: &Utterance) -> Result<&[usize]> {
    u.transcript
        .as_deref()
        .ok_or_else(|| Error::Config(format!("utterance `{}` has no transcript", u.id)))
}

/// Metrics of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttEval {
    pub id: String,
    pub loss: f64,
    pub frames: usize,
    /// Frames whose arg-max matches the label (framewise heads only).
    pub correct: usize,
    /// Edit distance of the greedy decode to the transcript.
    pub edits: usize,
    pub ref_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-utterance loss.
    pub loss: f64,
    pub frame_accuracy: Option<f64>,
    pub error_rate: Option<f64>,
    pub utterances: Vec<UttEval>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<UttEval>) -> Self {
        let n = rows.len().max(1) as f64;
        let loss = rows.iter().map(|r| r.loss).sum::<f64>() / n;
        let frames: usize = rows.iter().map(|r| r.frames).sum();
        let correct: usize = rows.iter().map(|r| r.correct).sum();
        let edits: usize = rows.iter().map(|r| r.edits).sum();
        let refs: usize = rows.iter().map(|r| r.ref_len).sum();
        EvalReport {
            loss,
            frame_accuracy: (frames > 0).then(|| correct as f64 / frames as f64),
            error_rate: (refs > 0).then(|| edits as f64 / refs as f64),
            utterances: rows,
        }
    }
}

/// Metrics of a log-probability lattice against an utterance's labels.
pub fn evaluate_lattice(id: &str, lat: &Tensor, u: &Utterance, head: Supervision) -> Result<UttEval> {
    Ok(match head {
        Supervision::Framewise => {
            let labels = labels_of(u)?;
            if labels.len() != lat.rows() {
                return Err(Error::DimMismatch {
                    context: "framewise lattice length",
                    expected: labels.len(),
                    got: lat.rows(),
                });
            }
            let mut loss = 0.0;
            let mut correct = 0;
            for (t, &l) in labels.iter().enumerate() {
                loss -= lat.get(t, l);
                let row = lat.row_slice(t);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == l);
            }
            UttEval {
                id: id.to_string(),
                loss: loss / labels.len() as f64,
                frames: labels.len(),
                correct,
                edits: 0,
                ref_len: 0,
            }
        }
        Supervision::Ctc => {
            let tr = transcript_of(u)?;
            let (loss, _) = ctc_nll(lat, tr)?;
            UttEval {
                id: id.to_string(),
                loss,
                frames: 0,
                correct: 0,
                edits: edit_distance(&greedy_decode(lat), tr),
                ref_len: tr.len(),
            }
        }
    })
}

/// Two CTC recognisers for two domains with private lower layers and a
/// shared topmost recurrent layer. Parameters: `ra.*`, `rb.*` private,
/// `top.*` shared.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedTopPair {
    lower: [RecurrentStack; 2],
    top: RecurrentStack,
    out: [Linear; 2],
}

impl SharedTopPair {
    pub fn new(input_dim: [usize; 2], hidden: usize, private_layers: usize, vocab: [usize; 2]) -> Result<Self> {
        if private_layers == 0 || hidden == 0 {
            return Err(Error::Config("each domain needs at least one private layer".into()));
        }
        let lower = [
            RecurrentStack::new("ra.enc", input_dim[0], hidden, private_layers, true),
            RecurrentStack::new("rb.enc", input_dim[1], hidden, private_layers, true),
        ];
        let top = RecurrentStack::new("top", 2 * hidden, hidden, 1, true);
        let out = [
            Linear::new("ra.out", 2 * hidden, vocab[0] + 1),
            Linear::new("rb.out", 2 * hidden, vocab[1] + 1),
        ];
        Ok(SharedTopPair { lower, top, out })
    }

    pub fn init(&self, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &self.lower {
            l.init(&mut p, &mut rng);
        }
        self.top.init(&mut p, &mut rng);
        for o in &self.out {
            o.init(&mut p, &mut rng);
        }
        p
    }

    /// CTC loss of an utterance from domain `d` (0 or 1).
    pub fn loss(&self, ctx: &mut Ctx, d: usize, u: &Utterance) -> Result<Var> {
        let lower = self
            .lower
            .get(d)
            .ok_or_else(|| Error::Config(format!("domain {d} is not 0 or 1")))?;
        let x = ctx.input(u.frames.clone());
        let h = lower.forward(ctx, x);
        let h = self.top.forward(ctx, h);
        let logits = self.out[d].forward(ctx, h);
        let lp = ctx.g.log_softmax(logits);
        ctc_loss_node(&mut ctx.g, lp, transcript_of(u)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_lattice_has_zero_error() {
        let u = Utterance::new("u", Tensor::zeros(3, 1)).unwrap().with_labels(vec![0, 0, 1]).unwrap();
        let lat = Tensor::from_rows(&[vec![0.0, -50.0, -50.0], vec![-50.0, 0.0, -50.0], vec![-50.0, -50.0, 0.0]]).unwrap();
        let lat = log_softmax_rows(&lat);
        let e = evaluate_lattice("u", &lat, &u, Supervision::Ctc).unwrap();
        assert_eq!(e.edits, 0);
        let fl = log_softmax_rows(&Tensor::from_rows(&[vec![0.0, -50.0], vec![0.0, -50.0], vec![-50.0, 0.0]]).unwrap());
        let e = evaluate_lattice("u", &fl, &u, Supervision::Framewise).unwrap();
        assert_eq!(e.correct, 3);
    }

    #[test]
    fn framewise_cannot_subsample() {
        let cfg = RecognizerConfig {
            input_dim: 2,
            hidden: 2,
            layers: 2,
            vocab: 2,
            head: Supervision::Framewise,
            pyramid: vec![false, true],
            lin_layers: 0,
        };
        assert!(Recognizer::new(cfg).is_err());
    }
}
