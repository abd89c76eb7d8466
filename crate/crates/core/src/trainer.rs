//! Mini-batch training with Adam, early stopping on a held-out loss,
//! scheduled prior updates and an append-only metric log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::permutation;
use crate::distributions::PriorStore;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{mix_seed, Ctx, Grads, Params};
use crate::recrep::PriorSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update at learning rate `lr`. Parameters
/// without a gradient are left alone.
pub fn adam_step(params: &mut Params, grads: &Grads, state: &mut AdamState, hyper: &AdamConfig, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let [r, c] = g.shape();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    /// First epoch trained at the decayed rate.
    pub start_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a held-out improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lr_decay: Option<LrDecay>,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub prior_update: Option<PriorSchedule>,
    /// Evaluate on held-out data every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 8,
            max_epochs: 10,
            patience: 5,
            seed: 0,
            lr_decay: None,
            clip: Some(5.0),
            prior_update: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size, patience and eval cadence must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(Error::Config(format!("decay factor {} outside (0, 1]", d.factor)));
            }
        }
        if let Some(s) = &self.prior_update {
            s.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_decay {
            Some(d) if epoch >= d.start_epoch => self.adam.lr * d.factor.powi((epoch - d.start_epoch + 1) as i32),
            _ => self.adam.lr,
        }
    }
}

/// A model plus its data, as seen by the training loop.
pub trait Task {
    /// Number of training examples.
    fn train_len(&self) -> usize;

    /// Training loss of a batch of example indices.
    fn batch_loss(&self, ctx: &mut Ctx, batch: &[usize], store: Option<&PriorStore>) -> Result<Var>;

    /// Held-out loss in evaluation mode; lower is better.
    fn dev_loss(&self, params: &Params, store: Option<&PriorStore>) -> Result<f64>;

    /// Extra held-out metrics to log.
    fn dev_metrics(&self, _params: &Params) -> Result<Vec<(String, f64)>> {
        Ok(Vec::new())
    }

    /// Posteriors of every training example, frozen as the next prior.
    fn snapshot_priors(&self, _params: &Params, _tag: u64) -> Result<Option<PriorStore>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only list of `(epoch, split, metric, value)` records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Values of one `(split, metric)` in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
    pub prior_updates: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest held-out loss.
    pub best: Params,
    /// Parameters after the last epoch run.
    pub last: Params,
    pub log: MetricLog,
    pub summary: TrainSummary,
    pub store: Option<PriorStore>,
}

/// Runs the training loop. Every random choice derives from `cfg.seed`, so
/// two runs with equal inputs produce identical outcomes.
///
/// A non-finite loss, gradient or parameter aborts with
/// [`Error::Diverged`] carrying the parameters from the end of the last
/// complete epoch.
pub fn train(task: &dyn Task, init: Params, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = task.train_len();
    if n == 0 {
        return Err(Error::Config("no training examples".into()));
    }
    let mut params = init;
    let mut adam = AdamState::default();
    let mut log = MetricLog::default();
    let mut store: Option<PriorStore> = None;
    let mut best = params.clone();
    let mut best_loss = task.dev_loss(&params, None)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut prior_updates = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0;
    log.push(0, "dev", "loss", best_loss);
    for epoch in 1..=cfg.max_epochs {
        let epoch_start = params.clone();
        let diverged = |params: Params| Error::Diverged {
            epoch,
            last_good: Box::new(params),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64]));
        let order = permutation(n, &mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seed = mix_seed(&[cfg.seed, epoch as u64, b as u64]);
            let mut ctx = Ctx::new(&params, seed, true);
            let loss = task.batch_loss(&mut ctx, batch, store.as_ref())?;
            let (value, mut grads) = match ctx.finish(loss) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => return Err(diverged(epoch_start)),
                Err(e) => return Err(e),
            };
            if !value.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(diverged(epoch_start));
            }
            if let Some(c) = cfg.clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam, &cfg.adam, lr)?;
            if !params.is_finite() {
                return Err(diverged(epoch_start));
            }
            total += value;
            batches += 1;
        }
        epochs_run = epoch;
        log.push(epoch, "train", "loss", total / batches as f64);
        let mut improved = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let dev = task.dev_loss(&params, store.as_ref())?;
            if !dev.is_finite() {
                return Err(diverged(epoch_start));
            }
            log.push(epoch, "dev", "loss", dev);
            for (name, v) in task.dev_metrics(&params)? {
                log.push(epoch, "dev", &name, v);
            }
            if dev < best_loss {
                best_loss = dev;
                best = params.clone();
                best_epoch = epoch;
                since_best = 0;
                improved = true;
            } else {
                since_best += 1;
            }
        }
        if let Some(s) = &cfg.prior_update {
            if s.fires(epoch, improved) {
                if let Some(new) = task.snapshot_priors(&params, epoch as u64)? {
                    store = Some(new);
                    prior_updates.push(epoch);
                    log.push(epoch, "train", "prior_update", 1.0);
                }
            }
        }
        if since_best >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        log,
        summary: TrainSummary {
            epochs_run,
            best_epoch,
            best_dev_loss: best_loss,
            stopped_early,
            prior_updates,
        },
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap());
        let before = p.clone();
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::zeros(1, 2));
        let mut st = AdamState::default();
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1e-2).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Params::new();
        p.insert("w", Tensor::zeros(1, 2));
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::zeros(2, 1));
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1e-2).is_err());
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig {
            lr_decay: Some(LrDecay {
                factor: 0.5,
                start_epoch: 3,
            }),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(2), 5e-4);
        assert_eq!(cfg.lr_at(3), 2.5e-4);
        assert_eq!(cfg.lr_at(4), 1.25e-4);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Grads::new();
        g.insert("a".into(), Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g["a"].sq_norm() - 1.0).abs() < 1e-12);
    }
}
