//! `GUIDIR1` container: an 8-byte magic, a little-endian `u64` index length,
//! a JSON index mapping tensor names to shape and byte offset, then the raw
//! little-endian `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"GUIDIR1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    kind: String,
    config: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the tensors belong to, e.g. `controlled-unet`.
    pub kind: String,
    /// Construction parameters needed to rebuild the model.
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: serde_json::Value, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config,
            tensors: store.snapshot()?,
        })
    }

    /// Copies every tensor into `store`; both sides must hold the same names.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        let expected: Vec<&str> = store.names().collect();
        let present: Vec<&str> = self.tensors.keys().map(String::as_str).collect();
        if expected != present {
            let missing: Vec<_> = expected.iter().filter(|n| !self.tensors.contains_key(**n)).collect();
            return Err(Error::Checkpoint(format!(
                "parameter sets differ; missing from checkpoint: {missing:?}"
            )));
        }
        for (name, (shape, data)) in &self.tensors {
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?;
            store.set(name, &t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, (shape, data)) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: shape.clone(),
                    offset,
                },
            );
            offset += data.len() * 4;
        }
        let index = serde_json::to_vec(&Index {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + index.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("file too short for a GUIDIR header".into()));
        }
        if &bytes[..8] != MAGIC {
            let found = String::from_utf8_lossy(&bytes[..8]).trim_end().to_string();
            return Err(Error::Checkpoint(if found.starts_with("GUIDIR") {
                format!("version mismatch: expected GUIDIR1, found {found}")
            } else {
                "not a GUIDIR checkpoint".to_string()
            }));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let index_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated index".into()))?;
        let index: Index = serde_json::from_slice(&bytes[16..index_end])?;
        let payload = &bytes[index_end..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in index.tensors {
            let count: usize = entry.shape.iter().product();
            let end = entry.offset + count * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {name} runs past the payload")));
            }
            let data = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, (entry.shape, data));
        }
        Ok(Self {
            kind: index.kind,
            config: index.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(DType::F32, 3);
        s.uniform("a.weight", &[2, 3], 3).unwrap();
        s.uniform("b", &[4], 1).unwrap();
        s
    }

    #[test]
    fn bytes_round_trip_and_restore() {
        let src = store();
        let ck = Checkpoint::from_store("test", serde_json::json!({"k": 1}), &src).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);

        let dst = ParamStore::new(DType::F32, 99);
        let mut dst = dst;
        dst.uniform("a.weight", &[2, 3], 3).unwrap();
        dst.uniform("b", &[4], 1).unwrap();
        back.load_into(&dst).unwrap();
        assert_eq!(dst.snapshot().unwrap(), src.snapshot().unwrap());
    }

    #[test]
    fn rejects_other_versions_and_mismatched_sets() {
        let ck = Checkpoint::from_store("test", serde_json::Value::Null, &store()).unwrap();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[6] = b'2';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version mismatch"), "{err}");
        assert!(Checkpoint::from_bytes(b"PNG.....xxxxxxxx").is_err());

        let mut other = ParamStore::new(DType::F32, 0);
        other.uniform("c", &[1], 1).unwrap();
        assert!(ck.load_into(&other).is_err());
        assert!(ck.expect_kind("controlled-unet").is_err());
    }
}
