//! Model checkpoints, stored with the same little-endian conventions as bags.
//!
//! ```text
//! 0   magic "MILC"
//! 4   version (1)
//! 8   header JSON byte length H
//! 12  header JSON (CheckpointHeader), H bytes
//!     tensor count T
//!     T × { name length L, name, rows, cols, rows·cols f32 }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::Tensor;

use super::io::{read_file, write_atomic, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// SHA-256 of the resolved run configuration.
    pub config_hash: String,
    /// 1-based epoch the weights were taken from.
    pub epoch: usize,
    pub val_macro_f1: f64,
    pub model: ModelConfig,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, header: CheckpointHeader) -> Self {
        Checkpoint {
            header,
            tensors: model.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Domain(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(4, format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32("header length")? as usize;
        let header_start = r.pos() as u64;
        let header_bytes = r.take(header_len, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| r.error_at(header_start, format!("invalid checkpoint header: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = r.utf8(name_len, "tensor name")?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let at = r.pos() as u64;
            let data = r.f32s(rows * cols, &format!("payload of {name}"))?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.error_at(at, format!("tensor {name} holds non-finite values")));
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if !r.at_end() {
            return Err(r.error_at(r.pos() as u64, "trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }

    /// Rebuilds the model and installs the stored weights by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.header.model.clone(), 0)?;
        if model.store.len() != self.tensors.len() {
            return Err(domain_err!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                model.store.len()
            ));
        }
        for (name, t) in &self.tensors {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| domain_err!("checkpoint tensor {name} is not part of the model"))?;
            model.store.assign(id, t.clone())?;
        }
        Ok(model)
    }
}
