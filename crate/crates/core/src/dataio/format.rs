//! On-disk formats for features, labels and dataset manifests.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! feature file  "SRF1" | u32 T | u32 D | u32 flags | T*D f32, row-major
//! label file    "SRL1" | u32 T | u32 vocab | u32 flags | T i32
//! manifest      JSON array of {id, feature_path, label_path?, transcript?,
//!                              view2_path?, speaker?}
//! ```
//!
//! `flags` is written as 0 and ignored on read. Paths in a manifest are
//! relative to the manifest's directory unless absolute.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"SRF1";
const LABEL_MAGIC: &[u8; 4] = b"SRL1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view2_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<usize>,
}

fn header(magic: &[u8; 4], a: usize, b: usize) -> [u8; 16] {
    let mut h = [0u8; 16];
    h[..4].copy_from_slice(magic);
    h[4..8].copy_from_slice(&(a as u32).to_le_bytes());
    h[8..12].copy_from_slice(&(b as u32).to_le_bytes());
    h
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<(usize, usize)> {
    let mut h = [0u8; 16];
    r.read_exact(&mut h)
        .map_err(|_| Error::Format(format!("{what}: truncated header")))?;
    if &h[..4] != magic {
        return Err(Error::Format(format!(
            "{what}: expected magic {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let a = u32::from_le_bytes(h[4..8].try_into().expect("4 bytes")) as usize;
    let b = u32::from_le_bytes(h[8..12].try_into().expect("4 bytes")) as usize;
    Ok((a, b))
}

pub fn encode_features(frames: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * frames.len());
    out.extend_from_slice(&header(FEATURE_MAGIC, frames.rows(), frames.cols()));
    for v in frames.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(mut bytes: &[u8]) -> Result<Tensor> {
    let (t, d) = read_header(&mut bytes, FEATURE_MAGIC, "feature file")?;
    if bytes.len() != 4 * t * d {
        return Err(Error::Format(format!(
            "feature file: header says {t}x{d} but payload has {} bytes",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(t, d, data)
}

pub fn encode_labels(labels: &[usize], vocab: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * labels.len());
    out.extend_from_slice(&header(LABEL_MAGIC, labels.len(), vocab));
    for &l in labels {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    out
}

/// Returns the labels and the vocabulary size from the header.
pub fn decode_labels(mut bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    let (t, vocab) = read_header(&mut bytes, LABEL_MAGIC, "label file")?;
    if bytes.len() != 4 * t {
        return Err(Error::Format(format!(
            "label file: header says {t} labels but payload has {} bytes",
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(t);
    for c in bytes.chunks_exact(4) {
        let v = i32::from_le_bytes(c.try_into().expect("4 bytes"));
        if v < 0 || v as usize >= vocab {
            return Err(Error::Format(format!("label file: label {v} outside vocabulary of {vocab}")));
        }
        labels.push(v as usize);
    }
    Ok((labels, vocab))
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    fs::write(path, encode_features(frames))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes every utterance to `dir` and a `manifest.json` listing them.
/// Returns the manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for u in &ds.utterances {
        let feature_path = format!("{}.srf", u.id);
        write_features(&dir.join(&feature_path), &u.frames)?;
        let label_path = match &u.labels {
            Some(l) => {
                let p = format!("{}.srl", u.id);
                fs::write(dir.join(&p), encode_labels(l, ds.vocab))?;
                Some(p)
            }
            None => None,
        };
        let view2_path = match &u.view2 {
            Some(v) => {
                let p = format!("{}.view2.srf", u.id);
                write_features(&dir.join(&p), v)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: u.id.clone(),
            feature_path,
            label_path,
            transcript: u.transcript.clone(),
            view2_path,
            speaker: u.speaker,
        });
    }
    let path = dir.join("manifest.json");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &entries)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

/// Loads a dataset from a manifest file, or from `manifest.json` inside a
/// directory. The vocabulary is taken from the label headers, or from the
/// largest transcript symbol when no label file is present.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(&manifest).map_err(|e| with_path(e, &manifest))?;
    let entries: Vec<ManifestEntry> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
    let mut vocab = 0usize;
    let mut utts = Vec::with_capacity(entries.len());
    for e in entries {
        let frames = read_features(&resolve(base, &e.feature_path))?;
        let mut u = Utterance::new(e.id.clone(), frames)?;
        if let Some(lp) = &e.label_path {
            let p = resolve(base, lp);
            let bytes = fs::read(&p).map_err(|err| with_path(err, &p))?;
            let (labels, v) = decode_labels(&bytes)?;
            vocab = vocab.max(v);
            u = u.with_labels(labels)?;
        }
        if let Some(tr) = e.transcript {
            vocab = vocab.max(tr.iter().max().map_or(0, |m| m + 1));
            if u.transcript.as_ref().is_some_and(|t| *t != tr) {
                return Err(Error::Format(format!(
                    "utterance `{}`: manifest transcript disagrees with its labels",
                    e.id
                )));
            }
            u.transcript = Some(tr);
        }
        if let Some(vp) = &e.view2_path {
            u.view2 = Some(read_features(&resolve(base, vp))?);
        }
        u.speaker = e.speaker;
        utts.push(u);
    }
    let ds = Dataset {
        vocab,
        utterances: utts,
    };
    for u in &ds.utterances {
        u.validate(ds.vocab)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_bytes_are_exact() {
        let t = Tensor::new(1, 2, vec![1.0, -2.0]).unwrap();
        let b = encode_features(&t);
        assert_eq!(&b[..4], b"SRF1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &[0, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_features(&b).unwrap(), t);
        assert!(decode_features(&b[..19]).is_err());
    }

    #[test]
    fn label_bytes_are_exact() {
        let b = encode_labels(&[2, 0, 1], 3);
        assert_eq!(b.len(), 16 + 12);
        assert_eq!(decode_labels(&b).unwrap(), (vec![2, 0, 1], 3));
        let bad = encode_labels(&[3], 3);
        assert!(decode_labels(&bad).is_err());
    }
}
