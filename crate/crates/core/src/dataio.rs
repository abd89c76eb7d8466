//! Utterances, the synthetic segment generator, windowing, reconstruction
//! targets and masks.
//!
//! Windows and targets that reach past either end of an utterance replicate
//! the edge frame, so they never change the number of frames.

pub mod format;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x D`, one frame per row.
    pub frames: Tensor,
    pub labels: Option<Vec<usize>>,
    pub transcript: Option<Vec<usize>>,
    /// Optional second view, `T x D2`, aligned frame by frame.
    pub view2: Option<Tensor>,
    pub speaker: Option<usize>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Shape("an utterance needs at least one frame".into()));
        }
        Ok(Utterance {
            id: id.into(),
            frames,
            labels: None,
            transcript: None,
            view2: None,
            speaker: None,
        })
    }

    /// Attaches framewise labels and the transcript obtained by collapsing
    /// repeated labels.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimMismatch {
                context: "framewise labels",
                expected: self.len(),
                got: labels.len(),
            });
        }
        self.transcript = Some(collapse_runs(&labels));
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Checks label ranges and transcript consistency.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.frames.rows() == 0 {
            return Err(Error::Shape(format!("utterance `{}` has no frames", self.id)));
        }
        let bad = |l: &usize| *l >= vocab;
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::Format(format!("utterance `{}`: label count differs from frames", self.id)));
            }
            if l.iter().any(bad) {
                return Err(Error::Format(format!("utterance `{}`: label outside vocabulary", self.id)));
            }
        }
        if let Some(tr) = &self.transcript {
            if tr.iter().any(bad) {
                return Err(Error::Format(format!("utterance `{}`: transcript symbol outside vocabulary", self.id)));
            }
            if let Some(l) = &self.labels {
                if collapse_runs(l) != *tr {
                    return Err(Error::Format(format!(
                        "utterance `{}`: transcript is not the collapsed label sequence",
                        self.id
                    )));
                }
            }
        }
        if let Some(v2) = &self.view2 {
            if v2.rows() != self.len() {
                return Err(Error::Format(format!("utterance `{}`: second view length differs", self.id)));
            }
        }
        Ok(())
    }
}

/// A list of utterances with their label vocabulary size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.utterances.first().map_or(0, Utterance::dim)
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    /// Splits off the first `n` utterances.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        (
            Dataset {
                vocab: self.vocab,
                utterances: self.utterances[..n].to_vec(),
            },
            Dataset {
                vocab: self.vocab,
                utterances: self.utterances[n..].to_vec(),
            },
        )
    }
}

/// Merges runs of equal symbols.
pub fn collapse_runs(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_states: usize,
    pub dim: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub n_utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of the per-frame emission noise.
    pub noise: f64,
    /// Standard deviation of the state means.
    pub mean_scale: f64,
    /// Number of distinct speakers; 0 disables the speaker distortion.
    pub n_speakers: usize,
    pub speaker_scale: f64,
    /// Width of an optional second view; 0 disables it.
    pub view2_dim: usize,
    pub view2_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_states: 5,
            dim: 20,
            min_segment: 3,
            max_segment: 8,
            n_utterances: 100,
            min_len: 20,
            max_len: 40,
            noise: 1.0,
            mean_scale: 1.0,
            n_speakers: 0,
            speaker_scale: 0.2,
            view2_dim: 0,
            view2_noise: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.n_states < 2 {
            return bad("need at least 2 states");
        }
        if self.dim == 0 {
            return bad("emission dimension must be positive");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return bad("segment length range must satisfy 1 <= min <= max");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("utterance length range must satisfy 1 <= min <= max");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("emission noise must be non-negative");
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return bad("mean scale must be positive");
        }
        if !(self.speaker_scale >= 0.0 && self.view2_noise >= 0.0) {
            return bad("speaker scale and second-view noise must be non-negative");
        }
        Ok(())
    }
}

/// Samples utterances from a left-to-right chain of state segments.
///
/// Each state `k` owns a mean vector. An utterance is a sequence of segments;
/// segment states are drawn uniformly without immediate repetition and
/// segment lengths uniformly from the configured range. A frame is its state
/// mean plus isotropic Gaussian noise, optionally passed through a
/// per-speaker affine map. The optional second view is `tanh` of a fixed
/// random projection of the clean state mean plus its own noise.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (cfg.n_states, cfg.dim);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| cfg.mean_scale * normal(&mut rng)).collect())
        .collect();
    let speakers: Vec<(Tensor, Vec<f64>)> = (0..cfg.n_speakers)
        .map(|_| {
            let mut a = Tensor::eye(d);
            let s = cfg.speaker_scale / (d as f64).sqrt();
            for v in a.data_mut() {
                *v += s * normal(&mut rng);
            }
            let b = (0..d).map(|_| cfg.speaker_scale * normal(&mut rng)).collect();
            (a, b)
        })
        .collect();
    let proj = (cfg.view2_dim > 0).then(|| {
        let s = 1.0 / (d as f64).sqrt();
        Tensor::from_vec(d, cfg.view2_dim, (0..d * cfg.view2_dim).map(|_| s * normal(&mut rng)).collect())
    });

    let mut utts = Vec::with_capacity(cfg.n_utterances);
    for u in 0..cfg.n_utterances {
        let t_len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut labels = Vec::with_capacity(t_len);
        let mut prev: Option<usize> = None;
        while labels.len() < t_len {
            let mut s = rng.random_range(0..k - 1);
            if let Some(p) = prev {
                if s >= p {
                    s += 1;
                }
            } else {
                s = rng.random_range(0..k);
            }
            let seg = rng.random_range(cfg.min_segment..=cfg.max_segment);
            for _ in 0..seg.min(t_len - labels.len()) {
                labels.push(s);
            }
            prev = Some(s);
        }
        let mut frames = Tensor::zeros(t_len, d);
        for (t, &s) in labels.iter().enumerate() {
            for (x, m) in frames.row_slice_mut(t).iter_mut().zip(&means[s]) {
                *x = m + cfg.noise * normal(&mut rng);
            }
        }
        let speaker = (cfg.n_speakers > 0).then(|| u % cfg.n_speakers);
        if let Some(sp) = speaker {
            let (a, b) = &speakers[sp];
            let mut out = frames.matmul(a);
            for t in 0..t_len {
                for (x, bb) in out.row_slice_mut(t).iter_mut().zip(b) {
                    *x += bb;
                }
            }
            frames = out;
        }
        let view2 = proj.as_ref().map(|p| {
            let mut y = Tensor::zeros(t_len, cfg.view2_dim);
            for (t, &s) in labels.iter().enumerate() {
                let clean = Tensor::row(&means[s]).matmul(p);
                for (o, c) in y.row_slice_mut(t).iter_mut().zip(clean.data()) {
                    *o = c.tanh() + cfg.view2_noise * normal(&mut rng);
                }
            }
            y
        });
        let mut utt = Utterance::new(format!("utt{u:05}"), frames)?.with_labels(labels)?;
        utt.view2 = view2;
        utt.speaker = speaker;
        utts.push(utt);
    }
    Ok(Dataset {
        vocab: k,
        utterances: utts,
    })
}

fn clamp_index(t: isize, len: usize) -> usize {
    t.clamp(0, len as isize - 1) as usize
}

/// Row `t` is `[x_{t-K}, ..., x_{t+K}]` with `K = (W-1)/2`, edge frames
/// replicated.
pub fn window_stack(frames: &Tensor, w: usize) -> Result<Tensor> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::Config(format!("window width {w} must be odd and positive")));
    }
    let (t_len, d) = (frames.rows(), frames.cols());
    let k = (w / 2) as isize;
    let mut out = Tensor::zeros(t_len, w * d);
    for t in 0..t_len {
        let row = out.row_slice_mut(t);
        for (j, off) in (-k..=k).enumerate() {
            let src = clamp_index(t as isize + off, t_len);
            row[j * d..(j + 1) * d].copy_from_slice(frames.row_slice(src));
        }
    }
    Ok(out)
}

/// Groups `n` consecutive frames into one. A partial trailing group is
/// dropped; labels keep the first frame of each group.
pub fn stack_frames(u: &Utterance, n: usize) -> Result<Utterance> {
    if n == 0 {
        return Err(Error::Config("stacking factor must be at least 1".into()));
    }
    let t_new = u.len() / n;
    if t_new == 0 {
        return Err(Error::Shape(format!(
            "utterance `{}` has {} frames, fewer than the stacking factor {n}",
            u.id,
            u.len()
        )));
    }
    let d = u.dim();
    let frames = Tensor::from_vec(t_new, n * d, u.frames.data()[..t_new * n * d].to_vec());
    let mut out = Utterance::new(u.id.clone(), frames)?;
    if let Some(l) = &u.labels {
        out = out.with_labels(l.iter().step_by(n).take(t_new).copied().collect())?;
    } else {
        out.transcript = u.transcript.clone();
    }
    out.view2 = u
        .view2
        .as_ref()
        .map(|v| Tensor::from_vec(t_new, n * v.cols(), v.data()[..t_new * n * v.cols()].to_vec()));
    out.speaker = u.speaker;
    Ok(out)
}

/// Subtracts each speaker's mean frame (variance is left alone).
/// Utterances without a speaker form one group.
pub fn speaker_mean_normalize(utts: &mut [Utterance]) {
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<Option<usize>, (Vec<f64>, usize)> = BTreeMap::new();
    for u in utts.iter() {
        let e = sums.entry(u.speaker).or_insert_with(|| (vec![0.0; u.dim()], 0));
        for t in 0..u.len() {
            for (s, x) in e.0.iter_mut().zip(u.frames.row_slice(t)) {
                *s += x;
            }
        }
        e.1 += u.len();
    }
    for u in utts.iter_mut() {
        let (s, n) = &sums[&u.speaker];
        let mean: Vec<f64> = s.iter().map(|v| v / *n as f64).collect();
        for t in 0..u.len() {
            for (x, m) in u.frames.row_slice_mut(t).iter_mut().zip(&mean) {
                *x -= m;
            }
        }
    }
}

/// Per-dimension standardisation fitted on one set and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(utts: &[Utterance]) -> Result<Self> {
        let d = utts.first().map(Utterance::dim).ok_or_else(|| Error::Config("cannot fit on no data".into()))?;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for u in utts {
            for t in 0..u.len() {
                for (j, x) in u.frames.row_slice(t).iter().enumerate() {
                    sum[j] += x;
                    sq[j] += x * x;
                }
            }
            n += u.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, utts: &mut [Utterance]) {
        for u in utts {
            for t in 0..u.len() {
                for ((x, m), s) in u.frames.row_slice_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                    *x = (*x - m) / s;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Current,
    Next,
    Prev,
    WindowConcat,
    WindowMean,
    WindowWeighted,
    RandomStep,
}

/// What a per-step decoder reconstructs.
///
/// `weights` (for `window_weighted`) and `probs` (for `random_step`) are
/// indexed by window offset `-K..=K` and must each have `2K+1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconTargetSpec {
    pub kind: TargetKind,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub probs: Vec<f64>,
}

impl ReconTargetSpec {
    pub fn current() -> Self {
        ReconTargetSpec {
            kind: TargetKind::Current,
            k: 0,
            weights: Vec::new(),
            probs: Vec::new(),
        }
    }

    pub fn of(kind: TargetKind, k: usize) -> Self {
        ReconTargetSpec {
            kind,
            k,
            weights: Vec::new(),
            probs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = 2 * self.k + 1;
        let check = |v: &[f64], what: &str| -> Result<()> {
            if v.len() != w {
                return Err(Error::Config(format!("{what} needs {w} entries, got {}", v.len())));
            }
            if v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::Config(format!("{what} must be non-negative")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("{what} must sum to 1, sum is {s}")));
            }
            Ok(())
        };
        match self.kind {
            TargetKind::WindowWeighted => check(&self.weights, "window weights"),
            TargetKind::RandomStep => check(&self.probs, "step probabilities"),
            _ => Ok(()),
        }
    }

    /// Width of the target given frame width `d`.
    pub fn dim(&self, d: usize) -> usize {
        match self.kind {
            TargetKind::WindowConcat | TargetKind::WindowWeighted => (2 * self.k + 1) * d,
            _ => d,
        }
    }
}

/// The target `u_t`. The flag is set when the requested frame lay outside
/// the utterance and an edge frame was used instead.
pub fn build_recon_target<R: Rng + ?Sized>(
    frames: &Tensor,
    t: usize,
    spec: &ReconTargetSpec,
    rng: &mut R,
) -> Result<(Vec<f64>, bool)> {
    spec.validate()?;
    let t_len = frames.rows();
    if t >= t_len {
        return Err(Error::Shape(format!("step {t} outside utterance of {t_len} frames")));
    }
    let k = spec.k as isize;
    let ti = t as isize;
    let at = |off: isize| -> (&[f64], bool) {
        let j = ti + off;
        let c = clamp_index(j, t_len);
        (frames.row_slice(c), c as isize != j)
    };
    Ok(match spec.kind {
        TargetKind::Current => (frames.row_slice(t).to_vec(), false),
        TargetKind::Next => {
            let (x, c) = at(1);
            (x.to_vec(), c)
        }
        TargetKind::Prev => {
            let (x, c) = at(-1);
            (x.to_vec(), c)
        }
        TargetKind::WindowConcat => {
            let mut out = Vec::new();
            let mut clamped = false;
            for off in -k..=k {
                let (x, c) = at(off);
                out.extend_from_slice(x);
                clamped |= c;
            }
            (out, clamped)
        }
        TargetKind::WindowMean => {
            let mut out = vec![0.0; frames.cols()];
            let mut clamped = false;
            for off in -k..=k {
                let (x, c) = at(off);
                for (o, v) in out.iter_mut().zip(x) {
                    *o += v;
                }
                clamped |= c;
            }
            let n = (2 * k + 1) as f64;
            (out.into_iter().map(|v| v / n).collect(), clamped)
        }
        TargetKind::WindowWeighted => {
            let mut out = Vec::new();
            let mut clamped = false;
            for (j, off) in (-k..=k).enumerate() {
                let (x, c) = at(off);
                out.extend(x.iter().map(|v| spec.weights[j] * v));
                clamped |= c;
            }
            (out, clamped)
        }
        TargetKind::RandomStep => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = spec.probs.len() - 1;
            for (j, p) in spec.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let (x, c) = at(pick as isize - k);
            (x.to_vec(), c)
        }
    })
}

/// Targets for every step, one per row.
pub fn build_recon_targets<R: Rng + ?Sized>(frames: &Tensor, spec: &ReconTargetSpec, rng: &mut R) -> Result<Tensor> {
    let rows = (0..frames.rows())
        .map(|t| build_recon_target(frames, t, spec, rng).map(|(v, _)| v))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub n_channel_masks: usize,
    pub max_channel_width: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            n_time_masks: 2,
            max_time_width: 4,
            n_channel_masks: 2,
            max_channel_width: 4,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn none() -> Self {
        MaskSpec {
            n_time_masks: 0,
            max_time_width: 0,
            n_channel_masks: 0,
            max_channel_width: 0,
            seed: 0,
        }
    }

    pub fn masks_anything(&self) -> bool {
        (self.n_time_masks > 0 && self.max_time_width > 0) || (self.n_channel_masks > 0 && self.max_channel_width > 0)
    }
}

/// A realised mask: `observed` is 1 where the input is kept. `central` is 1
/// on the middle `ceil(w/2)` indices of every masked run (a subset of the
/// masked cells).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    pub observed: Tensor,
    pub central: Tensor,
    /// `(start, width)` of each time run.
    pub time_runs: Vec<(usize, usize)>,
    /// `(start, width)` of each channel run.
    pub channel_runs: Vec<(usize, usize)>,
}

impl MaskMatrix {
    pub fn all_observed(t: usize, d: usize) -> Self {
        MaskMatrix {
            observed: Tensor::full(t, d, 1.0),
            central: Tensor::zeros(t, d),
            time_runs: Vec::new(),
            channel_runs: Vec::new(),
        }
    }

    pub fn masked(&self) -> Tensor {
        self.observed.map(|m| 1.0 - m)
    }

    pub fn masked_count(&self) -> usize {
        self.observed.data().iter().filter(|m| **m == 0.0).count()
    }
}

/// Index range of the central `ceil(w/2)` positions of a run.
pub fn central_range(start: usize, width: usize) -> std::ops::Range<usize> {
    let keep = width.div_ceil(2);
    let off = (width - keep) / 2;
    start + off..start + off + keep
}

/// Samples a mask from `spec.seed`.
pub fn gen_mask(spec: &MaskSpec, t: usize, d: usize) -> Result<MaskMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gen_mask_with(spec, t, d, &mut rng)
}

/// Samples exactly `n_time_masks` row runs and `n_channel_masks` column
/// runs; each width is uniform in `1..=max` and each start uniform over the
/// positions where the run fits. Runs may overlap.
pub fn gen_mask_with<R: Rng + ?Sized>(spec: &MaskSpec, t: usize, d: usize, rng: &mut R) -> Result<MaskMatrix> {
    if spec.n_time_masks > 0 && (spec.max_time_width > t) {
        return Err(Error::Config(format!(
            "time mask width up to {} cannot fit {t} frames",
            spec.max_time_width
        )));
    }
    if spec.n_channel_masks > 0 && (spec.max_channel_width > d) {
        return Err(Error::Config(format!(
            "channel mask width up to {} cannot fit {d} channels",
            spec.max_channel_width
        )));
    }
    let mut m = MaskMatrix::all_observed(t, d);
    if spec.max_time_width > 0 {
        for _ in 0..spec.n_time_masks {
            let w = rng.random_range(1..=spec.max_time_width);
            let s = rng.random_range(0..=t - w);
            m.time_runs.push((s, w));
        }
    }
    if spec.max_channel_width > 0 {
        for _ in 0..spec.n_channel_masks {
            let w = rng.random_range(1..=spec.max_channel_width);
            let s = rng.random_range(0..=d - w);
            m.channel_runs.push((s, w));
        }
    }
    for &(s, w) in &m.time_runs {
        for r in s..s + w {
            m.observed.row_slice_mut(r).fill(0.0);
        }
        for r in central_range(s, w) {
            m.central.row_slice_mut(r).fill(1.0);
        }
    }
    for &(s, w) in &m.channel_runs {
        for r in 0..t {
            m.observed.row_slice_mut(r)[s..s + w].fill(0.0);
        }
        for c in central_range(s, w) {
            for r in 0..t {
                m.central.set(r, c, 1.0);
            }
        }
    }
    Ok(m)
}

/// A uniformly random permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// A uniformly random permutation of `0..n` without fixed points
/// (rejection sampling). For `n < 2` the identity is returned.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    loop {
        let p = permutation(n, rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn noiseless_frames_equal_means() {
        let cfg = SynthConfig {
            n_states: 2,
            noise: 0.0,
            n_utterances: 3,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&cfg, 1).unwrap();
        let mut seen: [Option<Vec<f64>>; 2] = [None, None];
        for u in &ds.utterances {
            for (t, &l) in u.labels.as_ref().unwrap().iter().enumerate() {
                let row = u.frames.row_slice(t).to_vec();
                match &seen[l] {
                    Some(m) => assert_eq!(*m, row),
                    None => seen[l] = Some(row),
                }
            }
        }
    }

    #[test]
    fn generator_is_deterministic_and_consistent() {
        let cfg = SynthConfig {
            n_speakers: 3,
            view2_dim: 4,
            ..SynthConfig::default()
        };
        let a = gen_synthetic(&cfg, 9).unwrap();
        let b = gen_synthetic(&cfg, 9).unwrap();
        assert_eq!(a, b);
        for u in &a.utterances {
            u.validate(a.vocab).unwrap();
            assert_eq!(u.view2.as_ref().unwrap().shape(), [u.len(), 4]);
        }
        assert!(gen_synthetic(&SynthConfig { n_states: 1, ..cfg.clone() }, 0).is_err());
        assert!(gen_synthetic(&SynthConfig { min_len: 10, max_len: 5, ..cfg }, 0).is_err());
    }

    #[test]
    fn window_examples() {
        let x = frames(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 5.0]]);
        assert_eq!(window_stack(&x, 1).unwrap(), x);
        let w = window_stack(&x, 3).unwrap();
        assert_eq!(w.row_slice(1), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(w.row_slice(0), &[0.0, 1.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(window_stack(&x, 2).is_err());
    }

    #[test]
    fn target_examples() {
        let x = frames(&[&[0.0], &[2.0], &[4.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cur = build_recon_target(&x, 1, &ReconTargetSpec::current(), &mut rng).unwrap();
        assert_eq!(cur, (vec![2.0], false));
        let mean = ReconTargetSpec::of(TargetKind::WindowMean, 1);
        assert_eq!(build_recon_target(&x, 1, &mean, &mut rng).unwrap().0, vec![2.0]);
        let next = ReconTargetSpec::of(TargetKind::Next, 0);
        assert_eq!(build_recon_target(&x, 2, &next, &mut rng).unwrap(), (vec![4.0], true));
        let bad = ReconTargetSpec {
            kind: TargetKind::WindowWeighted,
            k: 1,
            weights: vec![0.5, 0.5, 0.5],
            probs: vec![],
        };
        assert!(build_recon_target(&x, 1, &bad, &mut rng).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = gen_mask(&MaskSpec::none(), 5, 3).unwrap();
        assert_eq!(m.observed, Tensor::full(5, 3, 1.0));
        assert_eq!(m.central.sum(), 0.0);
        assert_eq!(central_range(2, 4), 3..5);
        assert_eq!(central_range(0, 1), 0..1);
        assert_eq!(central_range(0, 3), 0..2);
        assert_eq!(central_range(0, 5), 1..4);
        let too_wide = MaskSpec {
            n_time_masks: 1,
            max_time_width: 6,
            ..MaskSpec::none()
        };
        assert!(gen_mask(&too_wide, 5, 3).is_err());
    }

    #[test]
    fn stacking() {
        let u = Utterance::new("u", Tensor::from_vec(7, 1, (0..7).map(f64::from).collect()))
            .unwrap()
            .with_labels(vec![0, 0, 1, 1, 1, 2, 2])
            .unwrap();
        assert_eq!(stack_frames(&u, 1).unwrap(), u);
        let s = stack_frames(&u, 3).unwrap();
        assert_eq!(s.frames.shape(), [2, 3]);
        assert_eq!(s.labels.as_ref().unwrap(), &vec![0, 1]);
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..10 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }
}
