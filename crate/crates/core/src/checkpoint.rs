//! Checkpoint container.
//!
//! Layout: the 8-byte magic `NRCKPT\0\0`, a little-endian `u64` header length,
//! a JSON header (format version, flat config, ranker kind, vocabulary and a
//! named-parameter index with shapes and byte offsets), then every parameter
//! as raw little-endian `f64`s in index order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{NeurankError, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"NRCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Ranker kind, or `pretrain` for encoder-only pretraining checkpoints.
    pub kind: String,
    pub config: KeyValues,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: KeyValues,
    pub vocab: Vec<String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let len = (t.numel() * 8) as u64;
            index.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: index,
        };
        let json = serde_json::to_vec(&header).map_err(|e| NeurankError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parameters come back with `requires_grad` set.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NeurankError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| NeurankError::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(NeurankError::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let data = &bytes[data_start..];
        let mut params = ParamSet::new();
        for e in &header.params {
            let (start, len) = (e.offset as usize, e.len as usize);
            let end = start.checked_add(len).filter(|&x| x <= data.len());
            let Some(end) = end else {
                return Err(NeurankError::Checkpoint(format!("parameter `{}` runs past end of file", e.name)));
            };
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), values)
                .map_err(|err| NeurankError::Checkpoint(format!("parameter `{}`: {err}", e.name)))?;
            params.insert(e.name.clone(), t.with_requires_grad(true));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            vocab: header.vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| NeurankError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.insert("encoder/a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        params.insert("head/w", Tensor::vector(vec![0.1, 0.2, 0.3]));
        params.set_requires_grad(true);
        let mut config = KeyValues::new();
        config.insert("hidden".into(), "8".into());
        Checkpoint {
            kind: "last-int".into(),
            config,
            vocab: vec!["[PAD]".into(), "x".into()],
            params,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage garbage garbage").is_err());
    }
}
