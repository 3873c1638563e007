//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSAP" | version: u32 | sha256(config json): [u8; 32]
//! config_len: u64 | config json | meta_len: u64 | metadata json
//! tensor_count: u32
//! repeated: name_len: u32 | name | dtype: u8 (0 = f32, 1 = f64) | rows: u32 | cols: u32 | row-major data
//! ```
//!
//! Tensors are written as `f64` by default so that save/load is lossless for training
//! state; `f32` tensors are accepted on load.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{bail, Error, Result};
use crate::graph::Mat;

pub const MAGIC: &[u8; 4] = b"FSAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: Map<String, Value>,
    pub tensors: BTreeMap<String, Mat>,
}

pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Format("oversized field".into()))?;
        self.take(n)
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            metadata: Map::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config));
        for json in [
            serde_json::to_vec(&self.config).expect("config serializes"),
            serde_json::to_vec(&self.metadata).expect("metadata serializes"),
        ] {
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match precision {
                Precision::F32 => 0,
                Precision::F64 => 1,
            });
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for &v in t.iter() {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let config: ModelConfig =
            serde_json::from_slice(r.blob()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config_digest(&config) != digest {
            bail!(Format, "checkpoint config digest mismatch");
        }
        let metadata: Map<String, Value> =
            serde_json::from_slice(r.blob()?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
            let data: Vec<f64> = match dtype {
                0 => r
                    .take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                1 => r
                    .take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                other => bail!(Format, "unknown tensor dtype {other}"),
            };
            let t = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            if tensors.insert(name.clone(), t).is_some() {
                bail!(Format, "duplicate tensor `{name}`");
            }
        }
        if r.pos != bytes.len() {
            bail!(Format, "trailing bytes after checkpoint");
        }
        Ok(Self {
            config,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(Precision::F64)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Mat> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn put_section<'a>(&mut self, prefix: &str, tensors: impl IntoIterator<Item = (&'a str, &'a Mat)>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ModelConfig::tiny());
        c.metadata.insert("step".into(), Value::from(7));
        c.tensors.insert(
            "a.w".into(),
            Array2::from_shape_vec((2, 3), vec![0.1, -2.5, 3.25e-9, 1.0 / 3.0, f64::MIN_POSITIVE, 7.0]).unwrap(),
        );
        c.tensors.insert("temp".into(), Array2::from_elem((1, 1), 0.07));
        c
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(Precision::F64)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_round_trip_rounds_values() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(Precision::F32)).unwrap();
        assert_eq!(back.tensors["a.w"][[0, 1]], -2.5);
        assert_eq!(back.tensors["a.w"][[1, 0]], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn truncation_and_tampering_are_rejected() {
        let bytes = sample().to_bytes(Precision::F64);
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[10] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
