//! Checkpoint files: a 4-byte big-endian manifest length, a JSON manifest,
//! then the little-endian f32 payload of every tensor in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::ParamSpec;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "mtcmtm-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_length: usize,
    pub trainable: bool,
}

/// Seed-derived generators are fully described by the seed and the number
/// of completed epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    /// Hash of the full run configuration.
    pub config_hash: String,
    /// Hash of the tabular encoder configuration; must match on transfer.
    pub encoder_hash: String,
    pub rng_state: RngState,
    pub epoch: u64,
    pub payload_sha256: String,
    /// Free-form description (model kind, task, strategy).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's JSON serialization.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("configurations serialize to JSON");
    sha256_hex(&json)
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        params: &ParamStore<T>,
        config_hash: String,
        encoder_hash: String,
        rng_state: RngState,
        meta: serde_json::Value,
    ) -> Self {
        let params = params.cast::<f32>();
        let mut offset = 0;
        let tensors = params
            .iter()
            .map(|(name, p)| {
                let byte_length = 4 * p.value.numel();
                let e = TensorEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    dtype: "f32".into(),
                    byte_offset: offset,
                    byte_length,
                    trainable: p.trainable,
                };
                offset += byte_length;
                e
            })
            .collect();
        let mut ck = Checkpoint {
            manifest: Manifest {
                format: FORMAT.into(),
                tensors,
                config_hash,
                encoder_hash,
                rng_state,
                epoch: rng_state.epoch,
                payload_sha256: String::new(),
                meta,
            },
            params,
        };
        ck.manifest.payload_sha256 = sha256_hex(&ck.payload());
        ck
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = (manifest.len() as u32).to_be_bytes().to_vec();
        out.extend_from_slice(&manifest);
        out.extend(self.payload());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 4 {
            return Err(bad("file shorter than the length prefix".into()));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let body = &bytes[4..];
        if body.len() < len {
            return Err(bad(format!("manifest length {len} exceeds file size")));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(bad(format!("unknown format `{}`", manifest.format)));
        }
        let payload = &body[len..];
        let mut expected = 0;
        for t in &manifest.tensors {
            if t.dtype != "f32" || t.byte_offset != expected || t.byte_length != 4 * t.shape.iter().product::<usize>() {
                return Err(bad(format!("tensor `{}` has an inconsistent layout", t.name)));
            }
            expected += t.byte_length;
        }
        if expected != payload.len() {
            return Err(bad(format!(
                "manifest describes {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        if sha256_hex(payload) != manifest.payload_sha256 {
            return Err(bad("payload checksum mismatch".into()));
        }
        let mut params = ParamStore::new();
        for t in &manifest.tensors {
            let data: Vec<f32> = payload[t.byte_offset..t.byte_offset + t.byte_length]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.trainable);
        }
        Ok(Checkpoint { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters for a model described by `specs`, checking that every
    /// tensor is present with the declared shape.
    pub fn params_for<T: Scalar>(&self, specs: &[ParamSpec]) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for s in specs {
            let v = self.params.get(&s.name)?;
            if v.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
            out.insert(s.name.clone(), v.cast(), s.trainable);
        }
        Ok(out)
    }
}
