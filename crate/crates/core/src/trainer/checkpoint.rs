//! Binary checkpoints.
//!
//! ```text
//! magic "CGCNCKPT" | version u32
//! model config (JSON) | training config (key = value text)   each: u64 length + UTF-8
//! tensor count u32
//! per tensor: name (u32 length + UTF-8) | rank u32 | dims u64 ... | data f64 ...
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"CGCNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Training config text that produced the model (may be empty).
    pub train_config: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_string(&self.model.config)?;
        for text in [cfg.as_str(), self.train_config.as_str()] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Incompatible("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!("unsupported checkpoint version {version}")));
        }
        let cfg_text = r.string_u64()?;
        let train_config = r.string_u64()?;
        let config: ModelConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| Error::Incompatible(format!("unreadable model config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Incompatible("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(&name, Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Incompatible("trailing bytes after checkpoint".into()));
        }
        let model = Model { config, params };
        check_layout(&model)?;
        Ok(Checkpoint { model, train_config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// The stored tensors must match what the stored config would create.
fn check_layout(model: &Model) -> Result<()> {
    let fresh = Model::new(model.config.clone(), 0).map_err(|e| Error::Incompatible(e.to_string()))?;
    if fresh.params.len() != model.params.len() {
        return Err(Error::Incompatible("parameter set differs from the stored config".into()));
    }
    for ((n1, t1), (n2, t2)) in fresh.params.iter().zip(model.params.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(Error::Incompatible(format!(
                "parameter {n2} {:?} does not match expected {n1} {:?}",
                t2.shape(),
                t1.shape()
            )));
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Incompatible("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string_u64(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Incompatible("config text is not UTF-8".into()))
    }
}
