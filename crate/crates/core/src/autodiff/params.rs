use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Result, Scalar, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

/// JSON header of a checkpoint file. The file layout is an 8-byte
/// little-endian header length, the header itself, then every tensor's
/// little-endian payload in header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::Checkpoint(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_bytes(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .iter()
            .map(|(name, t)| {
                let nbytes = t.len() * T::BYTES;
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        let header = CheckpointHeader {
            dtype: T::DTYPE.to_string(),
            tensors,
            metadata,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let bad = |m: &str| AutodiffError::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body_start])
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if header.dtype != T::DTYPE {
            return Err(AutodiffError::Checkpoint(format!(
                "dtype {} does not match requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let payload = &bytes[body_start..];
        let mut store = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.nbytes != n * T::BYTES || e.offset + e.nbytes > payload.len() {
                return Err(bad(&format!("bad extent for `{}`", e.name)));
            }
            let data = payload[e.offset..e.offset + e.nbytes]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        }
        Ok((store, header))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let bytes = self.to_bytes(metadata)?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the header of a checkpoint, whatever its dtype.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let bad = |m: &str| AutodiffError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if 8 + hlen > bytes.len() {
        return Err(bad("truncated header"));
    }
    serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
}
