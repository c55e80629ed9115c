//! Model checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SCWM" | u32 version | u32 header_len | header JSON | f32 tensor data
//! ```
//!
//! The header carries the model kind, a free-form `meta` object (the model
//! configuration, vocabulary, seed) and the ordered tensor table
//! `[{"name", "rows", "cols"}]`. Tensor data follows in table order, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCWM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Matrix>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, params: &ParamSet) -> Self {
        let mut entries = Vec::with_capacity(params.len());
        let mut tensors = Vec::with_capacity(params.len());
        for (name, m) in params.iter() {
            entries.push(TensorEntry { name: name.to_string(), rows: m.rows(), cols: m.cols() });
            tensors.push(m.clone());
        }
        Self { header: CheckpointHeader { kind: kind.to_string(), meta, tensors: entries }, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.tensors.iter().map(Matrix::len).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: &str| Error::Truncated { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        if bytes.len() < 12 {
            return Err(truncated("header prefix"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        if bytes.len() < header_end {
            return Err(truncated("header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::json(path.display().to_string(), e))?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            let end = offset + 4 * n;
            if bytes.len() < end {
                return Err(truncated(&format!("tensor {}", entry.name)));
            }
            let data =
                bytes[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            tensors.push(Matrix::from_vec(entry.rows, entry.cols, data));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(truncated("trailing bytes after tensor data"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Overwrites every parameter of `params` with the tensor of the same
    /// name. Fails on missing names or shape mismatches.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (entry, tensor) in self.header.tensors.iter().zip(&self.tensors) {
            let id =
                params.by_name(&entry.name).ok_or_else(|| Error::Shape(format!("unexpected tensor {}", entry.name)))?;
            let target = params.get_mut(id);
            if target.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor {}: checkpoint {:?}, model {:?}",
                    entry.name,
                    tensor.shape(),
                    target.shape()
                )));
            }
            *target = tensor.clone();
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("a", Matrix::from_vec(2, 2, vec![0.25, -1.5, 3.0, 1e-3]));
        ps.add("b", Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        ps
    }

    #[test]
    fn bytes_round_trip() {
        let mut ps = params();
        ps.round_to_f32();
        let ck = Checkpoint::new("test", serde_json::json!({"seed": 3}), &ps);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new("test", serde_json::Value::Null, &params());
        let mut bytes = ck.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut, Path::new("x")), Err(Error::Truncated { .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
    }
}
