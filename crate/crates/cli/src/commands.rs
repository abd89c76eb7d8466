//! One function per subcommand. Each is a pure function of its config,
//! input files and seed, so identical invocations write identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqrep::checkpoint::Checkpoint;
use seqrep::dataio::format::{load_dataset, save_dataset};
use seqrep::dataio::{gen_synthetic, Dataset};
use seqrep::nn::Params;
use seqrep::pretrain::{finetune_init, lin_adapt};
use seqrep::recognizer::Recognizer;
use seqrep::tasks::{ModelSpec, TaskOptions};
use seqrep::trainer::{train as run_trainer, TrainSummary};
use seqrep::Error;

use crate::config::{DataShape, Metric, ModelKind, RunConfig};
use crate::Failure;

const FRONTEND: &str = "frontend.";

/// What a checkpoint needs besides its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub command: String,
    pub spec: ModelSpec,
    /// Frozen feature extractor applied before `spec`; its tensors are
    /// stored under the `frontend.` prefix.
    pub frontend: Option<ModelSpec>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub model: String,
    #[serde(flatten)]
    pub train: TrainSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub model: String,
    pub metric: Metric,
    pub value: f64,
    /// Every metric computed along the way, including `value`.
    pub values: BTreeMap<String, f64>,
}

fn shape_of(ds: &Dataset) -> DataShape {
    let view2_dim = ds
        .utterances
        .first()
        .and_then(|u| u.view2.as_ref())
        .map_or(0, |v| v.cols());
    DataShape {
        dim: ds.dim(),
        vocab: ds.vocab,
        view2_dim,
    }
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    let ds = load_dataset(path)?;
    if ds.is_empty() {
        return Err(Failure::Invalid(format!("dataset {} has no utterances", path.display())));
    }
    Ok(ds)
}

/// Held-out and training portions of `ds` per the `[data]` section.
fn split(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset), Failure> {
    let n_dev = cfg.data.n_dev;
    if n_dev == 0 || n_dev >= ds.len() {
        return Err(Failure::Invalid(format!(
            "data.n_dev = {n_dev} must be between 1 and {} for a dataset of {} utterances",
            ds.len().saturating_sub(1),
            ds.len()
        )));
    }
    let (dev, rest) = ds.split_at(n_dev);
    let train = if cfg.data.n_train > 0 && cfg.data.n_train < rest.len() {
        rest.split_at(cfg.data.n_train).0
    } else {
        rest
    };
    Ok((train, dev))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let ds = gen_synthetic(&cfg.data.synth(), cfg.data.seed)?;
    let n_unl = cfg.data.n_unlabeled;
    if n_unl >= ds.len() {
        return Err(Failure::Invalid(format!(
            "data.n_unlabeled = {n_unl} leaves no labeled utterances out of {}",
            ds.len()
        )));
    }
    let (labeled, mut unlabeled) = ds.split_at(ds.len() - n_unl);
    let mut written = vec![save_dataset(out, &labeled)?];
    if n_unl > 0 {
        for u in &mut unlabeled.utterances {
            u.labels = None;
            u.transcript = None;
        }
        written.push(save_dataset(&out.join("unlabeled"), &unlabeled)?);
    }
    Ok(written)
}

fn write_run(
    out: &Path,
    meta: &Meta,
    params: Params,
    outcome_store: Option<seqrep::distributions::PriorStore>,
    csv: &str,
    summary: &RunSummary,
) -> Result<(), Failure> {
    std::fs::create_dir_all(out)?;
    let mut ckpt = Checkpoint::new(serde_json::to_value(meta).map_err(Error::from)?, params);
    ckpt.store = outcome_store;
    ckpt.save(out.join("model.ckpt"))?;
    std::fs::write(out.join("metrics.csv"), csv)?;
    let json = serde_json::to_string_pretty(summary).map_err(Error::from)?;
    std::fs::write(out.join("summary.json"), json + "\n")?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<RunSummary, Failure> {
    let ds = load(data)?;
    let (train, dev) = split(cfg, &ds)?;
    let spec = cfg.pretrain.spec(shape_of(&ds));
    let task = spec.task(&train, None, &dev, TaskOptions::default())?;
    let outcome = run_trainer(task.as_ref(), spec.init(cfg.train.seed)?, &cfg.train)?;
    let summary = RunSummary {
        model: spec.name().to_string(),
        train: outcome.summary.clone(),
    };
    let meta = Meta {
        command: "pretrain".into(),
        spec,
        frontend: None,
        config: cfg.clone(),
    };
    write_run(out, &meta, outcome.best, outcome.store, &outcome.log.to_csv(), &summary)?;
    Ok(summary)
}

fn is_encoder(spec: &ModelSpec) -> bool {
    matches!(spec, ModelSpec::Masked { .. } | ModelSpec::Recognizer { .. })
}

pub fn train(cfg: &RunConfig, data: &Path, init: Option<&Path>, lin: bool, out: &Path) -> Result<RunSummary, Failure> {
    let ds = load(data)?;
    let (mut train, mut dev) = split(cfg, &ds)?;
    let mut unlabeled = if cfg.data.unlabeled.is_empty() {
        None
    } else {
        if !matches!(cfg.model.kind, ModelKind::Recrep | ModelKind::RecrepPyramid) {
            return Err(Failure::Invalid(
                "data.unlabeled is only used by the recrep kinds; clear it for this model".into(),
            ));
        }
        Some(load(Path::new(&cfg.data.unlabeled))?)
    };
    if lin && cfg.model.kind != ModelKind::Recognizer {
        return Err(Failure::Invalid("--lin needs model.kind = \"recognizer\"".into()));
    }
    let seed = cfg.train.seed;

    let pretrained = init.map(Checkpoint::load).transpose()?;
    let pre_meta = pretrained.as_ref().map(meta_of).transpose()?;
    let mut frontend: Option<(ModelSpec, Params)> = None;
    let (spec, params) = match (pretrained, pre_meta) {
        (Some(ckpt), Some(meta)) if is_encoder(&meta.spec) && cfg.model.kind == ModelKind::Recognizer => {
            if meta.frontend.is_some() {
                return Err(Failure::Invalid("cannot fine-tune a checkpoint that has its own feature frontend".into()));
            }
            let ModelSpec::Recognizer { config } = cfg.model.spec(shape_of(&ds)) else {
                unreachable!("recognizer kind builds a recognizer")
            };
            let mut rec = Recognizer::new(config)?;
            if lin {
                rec = lin_adapt(&rec)?;
            }
            let mut p = finetune_init(&rec, &ckpt.params, seed)?;
            rec.fill_lin(&mut p);
            (ModelSpec::Recognizer { config: rec.cfg.clone() }, p)
        }
        (Some(ckpt), Some(meta)) => {
            let (own, _) = split_params(&ckpt.params);
            if meta.frontend.is_some() {
                return Err(Failure::Invalid("stacking two feature frontends is not supported".into()));
            }
            train = meta.spec.featurize(&own, &train)?;
            dev = meta.spec.featurize(&own, &dev)?;
            if let Some(u) = unlabeled.take() {
                unlabeled = Some(meta.spec.featurize(&own, &u)?);
            }
            let mut section = cfg.model.clone();
            section.lin_layers += usize::from(lin);
            let spec = section.spec(shape_of(&train));
            let p = spec.init(seed)?;
            frontend = Some((meta.spec, own));
            (spec, p)
        }
        _ => {
            let mut section = cfg.model.clone();
            section.lin_layers += usize::from(lin);
            let spec = section.spec(shape_of(&ds));
            let p = spec.init(seed)?;
            (spec, p)
        }
    };

    let opts = TaskOptions {
        unlabeled_per_batch: cfg.data.unlabeled_per_batch,
    };
    let task = spec.task(&train, unlabeled.as_ref(), &dev, opts)?;
    let outcome = run_trainer(task.as_ref(), params, &cfg.train)?;
    let summary = RunSummary {
        model: spec.name().to_string(),
        train: outcome.summary.clone(),
    };
    let mut params = outcome.best;
    let frontend_spec = frontend.map(|(s, p)| {
        for (name, t) in p.iter() {
            params.insert(format!("{FRONTEND}{name}"), t.clone());
        }
        s
    });
    let meta = Meta {
        command: "train".into(),
        spec,
        frontend: frontend_spec,
        config: cfg.clone(),
    };
    write_run(out, &meta, params, outcome.store, &outcome.log.to_csv(), &summary)?;
    Ok(summary)
}

fn meta_of(ckpt: &Checkpoint) -> Result<Meta, Failure> {
    serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| Failure::Invalid(format!("checkpoint metadata is not from this tool: {e}")))
}

/// Own tensors and frontend tensors (prefix stripped).
fn split_params(all: &Params) -> (Params, Params) {
    let (mut own, mut front) = (Params::new(), Params::new());
    for (name, t) in all.iter() {
        match name.strip_prefix(FRONTEND) {
            Some(rest) => front.insert(rest, t.clone()),
            None => own.insert(name.clone(), t.clone()),
        }
    }
    (own, front)
}

/// A checkpoint's model, its tensors, and `ds` passed through its frontend.
fn open(checkpoint: &Path, data: &Path) -> Result<(Meta, Params, Dataset), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let meta = meta_of(&ckpt)?;
    let (own, front) = split_params(&ckpt.params);
    let mut ds = load(data)?;
    if let Some(f) = &meta.frontend {
        ds = f.featurize(&front, &ds)?;
    }
    Ok((meta, own, ds))
}

pub fn extract(checkpoint: &Path, data: &Path, out: &Path) -> Result<PathBuf, Failure> {
    let (meta, params, ds) = open(checkpoint, data)?;
    let feats = meta.spec.featurize(&params, &ds)?;
    Ok(save_dataset(out, &feats)?)
}

pub fn eval(checkpoint: &Path, data: &Path, metric: Metric, csv: &Path) -> Result<EvalOutput, Failure> {
    let (meta, params, ds) = open(checkpoint, data)?;
    let spec = &meta.spec;
    let mut values = BTreeMap::new();
    match metric {
        Metric::Loss => {
            let task = spec.task(&ds, None, &ds, TaskOptions::default())?;
            values.insert("loss".to_string(), task.dev_loss(&params, None)?);
            values.extend(task.dev_metrics(&params)?);
        }
        Metric::FrameAccuracy | Metric::ErrorRate => {
            let ModelSpec::Recognizer { config } = spec else {
                return Err(Failure::Invalid(format!(
                    "{metric:?} needs a recognizer checkpoint, this one holds `{}`; try --metric probe or loss",
                    spec.name()
                )));
            };
            let refs: Vec<_> = ds.utterances.iter().collect();
            let report = Recognizer::new(config.clone())?.evaluate(&params, &refs)?;
            values.insert("loss".into(), report.loss);
            if let Some(a) = report.frame_accuracy {
                values.insert("frame_accuracy".into(), a);
            }
            if let Some(e) = report.error_rate {
                values.insert("error_rate".into(), e);
            }
        }
        Metric::Probe => {
            values.insert("probe".into(), probe_accuracy(spec, &params, &ds)?);
        }
    }
    let key = match metric {
        Metric::Loss => "loss",
        Metric::FrameAccuracy => "frame_accuracy",
        Metric::ErrorRate => "error_rate",
        Metric::Probe => "probe",
    };
    let value = *values.get(key).ok_or_else(|| {
        Failure::Invalid(format!("{key} is not defined for this checkpoint's head and data"))
    })?;
    let mut text = String::from("metric,value\n");
    for (k, v) in &values {
        text += &format!("{k},{v}\n");
    }
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(csv, text)?;
    Ok(EvalOutput {
        model: spec.name().to_string(),
        metric,
        value,
        values,
    })
}

/// Nearest-class-mean accuracy on the second half of the utterances, with
/// means fitted on the first half.
pub fn probe_accuracy(spec: &ModelSpec, params: &Params, ds: &Dataset) -> Result<f64, Failure> {
    if ds.len() < 2 {
        return Err(Failure::Invalid("the probe needs at least two utterances".into()));
    }
    let mut rows: Vec<(Vec<f64>, usize, bool)> = Vec::new();
    let half = ds.len() / 2;
    for (i, u) in ds.utterances.iter().enumerate() {
        let f = spec.features(params, u)?;
        let labels = u
            .labels
            .as_ref()
            .ok_or_else(|| Failure::Invalid(format!("utterance `{}` has no frame labels", u.id)))?;
        if labels.len() != f.rows() {
            return Err(Failure::Invalid(format!(
                "`{}` yields {} feature rows for {} labels; the probe needs one row per frame",
                spec.name(),
                f.rows(),
                labels.len()
            )));
        }
        for (t, &l) in labels.iter().enumerate() {
            rows.push((f.row_slice(t).to_vec(), l, i < half));
        }
    }
    let d = rows[0].0.len();
    let mut sums = vec![vec![0.0; d]; ds.vocab];
    let mut counts = vec![0usize; ds.vocab];
    for (x, l, fit) in &rows {
        if *fit {
            counts[*l] += 1;
            for (s, v) in sums[*l].iter_mut().zip(x) {
                *s += v;
            }
        }
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let (mut correct, mut total) = (0usize, 0usize);
    for (x, l, fit) in &rows {
        if *fit {
            continue;
        }
        let best = means
            .iter()
            .enumerate()
            .filter_map(|(k, m)| m.as_ref().map(|m| (k, x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k);
        correct += usize::from(best == Some(*l));
        total += 1;
    }
    Ok(correct as f64 / total.max(1) as f64)
}
