//! Single-file parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "TRJKDCK\0"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes of UTF-8 JSON (role, configs, curve, fingerprint, tensor table)
//! data    every tensor's f64 values in table order, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fingerprint, EpochRecord, ExperimentConfig, Role, TrainedModel};
use crate::encoders::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRJKDCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: Role,
    code_version: String,
    fingerprint: String,
    experiment: ExperimentConfig,
    model: ModelConfig,
    curve: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.model.store.named_arrays();
        let header = Header {
            role: self.role,
            code_version: super::CODE_VERSION.to_string(),
            fingerprint: self.fingerprint.clone(),
            experiment: self.experiment.clone(),
            model: self.model.config.clone(),
            curve: self.curve.clone(),
            tensors: arrays
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.store.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &arrays {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = &bytes[20 + hlen..];
        let mut arrays = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < 8 * n {
                return Err(Error::Checkpoint(format!(
                    "truncated data for tensor {}",
                    t.name
                )));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((t.name.clone(), Mat::from_vec(t.rows, t.cols, values)));
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut model = Model::new(header.model, 0)?;
        model.store.load_from(&arrays)?;
        let expected = fingerprint(header.role, &header.experiment, &model);
        if expected != header.fingerprint {
            return Err(Error::Checkpoint(format!(
                "fingerprint mismatch: stored {} but contents hash to {expected} (written by version {})",
                header.fingerprint, header.code_version
            )));
        }
        Ok(Self {
            role: header.role,
            experiment: header.experiment,
            model,
            curve: header.curve,
            fingerprint: header.fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
