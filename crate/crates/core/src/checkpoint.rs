//! Checkpoint files (`SRC1`).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "SRC1" | u32 version (1) | u32 meta length | meta (UTF-8 JSON)
//! u32 tensor count | per tensor: u32 name length | name | u32 rows | u32 cols | f64 data
//! u8 store flag | prior store (if flag is 1)
//! ```
//!
//! Tensors are written in name order, and the metadata JSON has sorted
//! keys, so equal checkpoints are byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::distributions::PriorStore;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SRC1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model kind, configuration and anything else needed to rebuild it.
    pub meta: serde_json::Value,
    pub params: Params,
    pub store: Option<PriorStore>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, params: Params) -> Self {
        Checkpoint {
            meta,
            params,
            store: None,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION as usize)?;
        let meta = serde_json::to_vec(&self.meta)?;
        put_u32(w, meta.len())?;
        w.write_all(&meta)?;
        put_u32(w, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.rows())?;
            put_u32(w, t.cols())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.store {
            Some(s) => {
                w.write_all(&[1])?;
                s.write_to(w)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = get_u32(r)?;
        let mut meta = vec![0u8; n];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = get_u32(r)?;
        let mut params = Params::new();
        for _ in 0..count {
            let n = get_u32(r)?;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (rows, cols) = (get_u32(r)?, get_u32(r)?);
            let mut data = vec![0.0; rows * cols];
            let mut b = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            if params.contains(&name) {
                return Err(Error::Format(format!("tensor `{name}` appears twice")));
            }
            params.insert(name, Tensor::new(rows, cols, data)?);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let store = match flag[0] {
            0 => None,
            1 => Some(PriorStore::read_from(r)?),
            f => return Err(Error::Format(format!("bad prior-store flag {f}"))),
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        Ok(Checkpoint { meta, params, store })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
