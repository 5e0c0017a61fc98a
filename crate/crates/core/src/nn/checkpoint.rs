//! `EFCKPT01` checkpoint container.
//!
//! Layout: 8-byte magic, u32 little-endian header length, JSON header, then
//! raw little-endian f32 payloads in manifest order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EFCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Auxiliary sections (frozen entropy tables, training provenance).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub aux: serde_json::Map<String, serde_json::Value>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(arch: serde_json::Value, seed: u64, tensors: Vec<(String, Tensor)>) -> Self {
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let byte_len = 4 * t.len() as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                    byte_len,
                };
                offset += byte_len;
                e
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                arch,
                seed,
                tensors: entries,
                aux: serde_json::Map::new(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Config("checkpoint header exceeds 4 GiB".into()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return format_err("not an EFCKPT01 checkpoint");
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return format_err(format!("unsupported checkpoint version {}", header.format_version));
        }
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.byte_len != 4 * n as u64 {
                return format_err(format!("tensor {} byte_len does not match shape", e.name));
            }
            let start = e.byte_offset as usize;
            let end = start
                .checked_add(e.byte_len as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor {} payload truncated", e.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let a = Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        let b = Tensor::new(&[3], vec![0.25, 0.5, 0.75]).unwrap();
        Checkpoint::new(serde_json::json!({"k": 1}), 7, vec![("a".into(), a), ("b".into(), b)])
    }

    #[test]
    fn layout_is_magic_len_json_payload() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"EFCKPT01");
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header["tensors"][1]["byte_offset"], 16);
        assert_eq!(header["seed"], 7);
        assert_eq!(bytes.len(), 12 + hl + 7 * 4);
        assert_eq!(&bytes[12 + hl..12 + hl + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip_and_truncation() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.tensors[1].1, ck.tensors[1].1);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }
}
