//! Diagonal Gaussians, reparameterised sampling and KL divergences.
//!
//! The decoder observation model is a unit-variance Gaussian, so the
//! log-likelihood is reported without its normalising constant:
//! `log p(x | mean) = -||x - mean||^2 / 2`.
//!
//! Log-variances are clamped to `[-14, 14]` wherever they are produced by a
//! network; [`DiagGaussian::variance`] applies the same clamp.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::LOGVAR_CLAMP;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::DimMismatch {
                context: "gaussian logvar",
                expected: mu.len(),
                got: logvar.len(),
            });
        }
        if !mu.iter().chain(&logvar).all(|v| v.is_finite()) {
            return Err(Error::Format("gaussian parameters must be finite".into()));
        }
        Ok(DiagGaussian { mu, logvar })
    }

    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mu: vec![0.0; d],
            logvar: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar
            .iter()
            .map(|l| l.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP).exp())
            .collect()
    }

    /// Log density including the normalising constant.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(x)
            .map(|((m, lv), x)| -0.5 * (ln2pi + lv + (x - m) * (x - m) / lv.exp()))
            .sum()
    }
}

/// `mu + kappa * noise * exp(logvar / 2)`.
pub fn reparam_sample(q: &DiagGaussian, noise: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::DimMismatch {
            context: "reparameterisation noise",
            expected: q.dim(),
            got: noise.len(),
        });
    }
    Ok(q.mu
        .iter()
        .zip(&q.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + kappa * e * (lv / 2.0).exp())
        .collect())
}

/// `KL(q || N(0, I)) = ||mu||^2/2 + sum(sigma^2/2 - log sigma) - d/2`.
pub fn kl_to_standard(q: &DiagGaussian) -> f64 {
    q.mu
        .iter()
        .zip(&q.logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

pub fn kl_diag_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            context: "kl between gaussians",
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok((0..q.dim())
        .map(|i| {
            let d = q.mu[i] - p.mu[i];
            0.5 * (p.logvar[i] - q.logvar[i] + ((q.logvar[i]).exp() + d * d) / p.logvar[i].exp() - 1.0)
        })
        .sum())
}

/// `-||x - mean||^2 / 2`.
pub fn gaussian_loglik(x: &[f64], mean: &[f64]) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::DimMismatch {
            context: "gaussian log-likelihood",
            expected: mean.len(),
            got: x.len(),
        });
    }
    Ok(-0.5 * x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Per-row `KL(N(mu, exp(lv)) || N(0, I))` as an `n x 1` column.
pub fn kl_standard_rows(g: &mut Graph, mu: Var, lv: Var) -> Var {
    let m2 = g.square(mu);
    let v = g.exp(lv);
    let a = g.add(m2, v);
    let b = g.sub(a, lv);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_cols(c);
    g.scale(s, 0.5)
}

/// Per-row `sum(exp(lv)/2 - lv/2 - 1/2)`: the part of the standard-normal
/// KL that does not involve the mean.
pub fn kl_variance_rows(g: &mut Graph, lv: Var) -> Var {
    let v = g.exp(lv);
    let b = g.sub(v, lv);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_cols(c);
    g.scale(s, 0.5)
}

/// Per-row `KL(N(mu_q, exp(lv_q)) || N(mu_p, exp(lv_p)))` as an `n x 1`
/// column. The prior is supplied as values and receives no gradient.
pub fn kl_diag_rows(g: &mut Graph, mu: Var, lv: Var, prior_mu: &Tensor, prior_lv: &Tensor) -> Var {
    let pm = g.constant(prior_mu.clone());
    let inv_pv = prior_lv.map(|l| (-l).exp());
    let d = g.sub(mu, pm);
    let d2 = g.square(d);
    let v = g.exp(lv);
    let num = g.add(v, d2);
    let ratio = g.mul_const(num, inv_pv);
    let plv = g.constant(prior_lv.clone());
    let a = g.sub(plv, lv);
    let b = g.add(a, ratio);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_cols(c);
    g.scale(s, 0.5)
}

/// Row-aligned prior means and log-variances for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorRows {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl PriorRows {
    pub fn standard(rows: usize, d: usize) -> Self {
        PriorRows {
            mu: Tensor::zeros(rows, d),
            logvar: Tensor::zeros(rows, d),
        }
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> PriorRows {
        PriorRows {
            mu: self.mu.slice_cols(start, len),
            logvar: self.logvar.slice_cols(start, len),
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> PriorRows {
        PriorRows {
            mu: self.mu.slice_rows(start, len),
            logvar: self.logvar.slice_rows(start, len),
        }
    }
}

/// Per-row KL against the standard normal, or against `prior` when given.
pub fn kl_rows(g: &mut Graph, mu: Var, lv: Var, prior: Option<&PriorRows>) -> Var {
    match prior {
        None => kl_standard_rows(g, mu, lv),
        Some(p) => {
            assert_eq!(g.shape(mu), p.mu.shape(), "prior rows do not match the posterior");
            kl_diag_rows(g, mu, lv, &p.mu, &p.logvar)
        }
    }
}

/// Frozen per-utterance, per-step Gaussians used as sample-specific priors.
///
/// A store carries the epoch tag of the parameters that produced it. Each
/// `(utterance, step)` key may be written once; lookups of absent keys fail.
///
/// Binary layout (little-endian):
///
/// ```text
/// "SRP1" | u64 tag | u32 dim | u32 count
/// count x ( u32 id_len | id bytes | u32 t | u32 d | d x f64 mu | d x f64 logvar )
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStore {
    tag: u64,
    dim: usize,
    entries: BTreeMap<(String, usize), DiagGaussian>,
}

impl PriorStore {
    pub fn new(tag: u64, dim: usize) -> Self {
        PriorStore {
            tag,
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: &str, t: usize, q: DiagGaussian) -> Result<()> {
        if q.dim() != self.dim {
            return Err(Error::DimMismatch {
                context: "prior store entry",
                expected: self.dim,
                got: q.dim(),
            });
        }
        let key = (id.to_string(), t);
        if self.entries.contains_key(&key) {
            return Err(Error::StoreImmutable {
                id: id.to_string(),
                t,
                tag: self.tag,
            });
        }
        self.entries.insert(key, q);
        Ok(())
    }

    pub fn get(&self, id: &str, t: usize) -> Result<&DiagGaussian> {
        self.entries
            .get(&(id.to_string(), t))
            .ok_or_else(|| Error::StoreMiss { id: id.to_string(), t })
    }

    /// Stacks the priors for steps `0..steps` of one utterance into
    /// `(mu, logvar)` matrices.
    pub fn stacked(&self, id: &str, steps: usize) -> Result<(Tensor, Tensor)> {
        let mut mu = Vec::with_capacity(steps * self.dim);
        let mut lv = Vec::with_capacity(steps * self.dim);
        for t in 0..steps {
            let q = self.get(id, t)?;
            mu.extend_from_slice(&q.mu);
            lv.extend_from_slice(&q.logvar);
        }
        Ok((Tensor::from_vec(steps, self.dim, mu), Tensor::from_vec(steps, self.dim, lv)))
    }

    /// Writes the posteriors of one utterance, row `t` being step `t`.
    pub fn insert_rows(&mut self, id: &str, mu: &Tensor, logvar: &Tensor) -> Result<()> {
        if mu.shape() != logvar.shape() {
            return Err(Error::Shape("posterior mean and log-variance differ in shape".into()));
        }
        for t in 0..mu.rows() {
            let q = DiagGaussian::new(mu.row_slice(t).to_vec(), logvar.row_slice(t).to_vec())?;
            self.insert(id, t, q)?;
        }
        Ok(())
    }

    /// Priors for a list of `(utterance, step)` keys, one row per key.
    pub fn gather(&self, keys: &[(String, usize)]) -> Result<PriorRows> {
        let mut mu = Vec::with_capacity(keys.len() * self.dim);
        let mut lv = Vec::with_capacity(keys.len() * self.dim);
        for (id, t) in keys {
            let q = self.get(id, *t)?;
            mu.extend_from_slice(&q.mu);
            lv.extend_from_slice(&q.logvar);
        }
        Ok(PriorRows {
            mu: Tensor::from_vec(keys.len(), self.dim, mu),
            logvar: Tensor::from_vec(keys.len(), self.dim, lv),
        })
    }

    /// Like [`PriorStore::stacked`], as row-aligned priors.
    pub fn utterance(&self, id: &str, steps: usize) -> Result<PriorRows> {
        let (mu, logvar) = self.stacked(id, steps)?;
        Ok(PriorRows { mu, logvar })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, usize), &DiagGaussian)> {
        self.entries.iter()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"SRP1")?;
        w.write_all(&self.tag.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for ((id, t), q) in &self.entries {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(*t as u32).to_le_bytes())?;
            w.write_all(&(q.dim() as u32).to_le_bytes())?;
            for v in q.mu.iter().chain(&q.logvar) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SRP1" {
            return Err(Error::Format("prior store: bad magic".into()));
        }
        let tag = read_u64(r)?;
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut store = PriorStore::new(tag, dim);
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let mut id = vec![0u8; n];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Format("prior store: id is not UTF-8".into()))?;
            let t = read_u32(r)? as usize;
            let d = read_u32(r)? as usize;
            let mut vals = vec![0.0; 2 * d];
            for v in &mut vals {
                *v = read_f64(r)?;
            }
            let lv = vals.split_off(d);
            store.insert(&id, t, DiagGaussian::new(vals, lv)?)?;
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
