//! Checkpoint files: a JSON header followed by a little-endian blob.
//!
//! Layout: `u64` LE header length, the header JSON, then every tensor's
//! values as row-major `f64` LE at the byte offset recorded in the header
//! (offsets are relative to the start of the blob).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 8);
        for (_, p) in self.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                dtype: "f64".into(),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
            });
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            tensors,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + blob.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("truncated header length"))?
            .try_into()
            .expect("eight bytes");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])?;
        let blob = &bytes[header_end..];
        let mut params = ParamStore::new();
        for entry in header.tensors {
            if entry.dtype != "f64" {
                return Err(bad(&format!("unsupported dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let end = entry
                .offset
                .checked_add(n * 8)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| bad(&format!("blob too short for {}", entry.name)))?;
            let data = blob[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        Ok(Self {
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
