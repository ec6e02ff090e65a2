//! Binary checkpoint format.
//!
//! Layout: magic `S2VF`, format version (u32 LE), header length in bytes
//! (u32 LE), UTF-8 JSON header, then raw little-endian payloads in manifest
//! order. The header carries the spec and its hash, the array manifest
//! (name, role, dtype, shape, byte offset), optimizer counters, seed, best
//! validation loss, the fitted preprocessing and a SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Scalar;
use crate::data::Preprocessor;
use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec, ParamKind};

use super::optim::{AdamConfig, Optimizer, OptimizerKind};

pub const MAGIC: &[u8; 4] = b"S2VF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub seed: u64,
    pub best_valid: Option<f64>,
    pub preprocessor: Option<Preprocessor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Weight,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    role: Role,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    step: u64,
    adam: AdamConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec_hash: String,
    spec: ModelSpec,
    seed: u64,
    best_valid: Option<f64>,
    preprocessor: Option<Preprocessor>,
    optimizer: Option<OptimizerHeader>,
    payload_bytes: u64,
    payload_sha256: String,
    arrays: Vec<ArrayEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        let mut push = |name: &str, role: Role, shape: &[usize], data: &[T], payload: &mut Vec<u8>| {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                role,
                dtype: T::DTYPE.to_string(),
                shape: shape.to_vec(),
                offset: payload.len() as u64,
            });
            for &x in data {
                x.write_le(payload);
            }
        };
        for (_, e) in self.model.params.iter() {
            let role = match e.kind {
                ParamKind::Weight => Role::Weight,
                ParamKind::Buffer => Role::Buffer,
            };
            push(&e.name, role, e.tensor.shape(), e.tensor.data(), &mut payload);
        }
        if let Some(opt) = &self.optimizer {
            for (role, moments) in [(Role::AdamM, &opt.m), (Role::AdamV, &opt.v)] {
                for ((_, e), m) in self.model.params.iter().zip(moments) {
                    if let Some(m) = m {
                        push(&e.name, role, e.tensor.shape(), m, &mut payload);
                    }
                }
            }
        }
        let header = Header {
            spec_hash: self.model.spec.hash(),
            spec: self.model.spec.clone(),
            seed: self.seed,
            best_valid: self.best_valid,
            preprocessor: self.preprocessor.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind,
                step: o.step,
                adam: o.adam,
            }),
            payload_bytes: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Checkpoint("header larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint. When `expected` is given, its hash must equal the
    /// stored spec hash.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<Self> {
        let truncated = || Error::Integrity("file is truncated".into());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let word = |at: usize| -> Result<u32> {
            let b = bytes.get(at..at + 4).ok_or_else(truncated)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let version = word(4)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = word(8)? as usize;
        let json = bytes.get(12..12 + header_len).ok_or_else(truncated)?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let payload = &bytes[12 + header_len..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::Integrity(format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        if header.spec.hash() != header.spec_hash {
            return Err(Error::Integrity("stored spec does not match its hash".into()));
        }
        if let Some(spec) = expected {
            let want = spec.hash();
            if want != header.spec_hash {
                return Err(Error::Checkpoint(format!(
                    "spec hash mismatch: checkpoint {} ({}), expected {} ({})",
                    &header.spec_hash[..12],
                    header.spec.kind,
                    &want[..12],
                    spec.kind
                )));
            }
        }
        let mut model = Model::<T>::new(header.spec.clone(), header.seed)?;
        let mut optimizer = header.optimizer.as_ref().map(|o| {
            let mut opt = Optimizer::new(o.kind, model.params.len());
            opt.step = o.step;
            opt.adam = o.adam;
            opt
        });
        let mut seen = vec![false; model.params.len()];
        for a in &header.arrays {
            if a.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has dtype {}, expected {}",
                    a.name,
                    a.dtype,
                    T::DTYPE
                )));
            }
            let id = model
                .params
                .id(&a.name)
                .ok_or_else(|| Error::Integrity(format!("unknown array `{}`", a.name)))?;
            let entry = model.params.get(id);
            if entry.tensor.shape() != a.shape.as_slice() {
                return Err(Error::Integrity(format!("array `{}` has shape {:?}", a.name, a.shape)));
            }
            let n = entry.tensor.numel();
            let start = a.offset as usize;
            let raw = payload
                .get(start..start + n * T::BYTES)
                .ok_or_else(|| Error::Integrity(format!("array `{}` lies outside the payload", a.name)))?;
            let values: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let kind_ok = matches!(
                (a.role, entry.kind),
                (Role::Weight, ParamKind::Weight) | (Role::Buffer, ParamKind::Buffer) | (Role::AdamM | Role::AdamV, _)
            );
            if !kind_ok {
                return Err(Error::Integrity(format!("array `{}` has the wrong role", a.name)));
            }
            match a.role {
                Role::Weight | Role::Buffer => {
                    model.params.tensor_mut(id).data_mut().copy_from_slice(&values);
                    seen[id.index()] = true;
                }
                Role::AdamM | Role::AdamV => {
                    let opt = optimizer
                        .as_mut()
                        .ok_or_else(|| Error::Integrity("moment arrays without optimizer state".into()))?;
                    let slot = if a.role == Role::AdamM { &mut opt.m } else { &mut opt.v };
                    slot[id.index()] = Some(values);
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &model.params.iter().nth(missing).expect("index in range").1.name;
            return Err(Error::Integrity(format!("missing array `{name}`")));
        }
        Ok(Self {
            model,
            optimizer,
            seed: header.seed,
            best_valid: header.best_valid,
            preprocessor: header.preprocessor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelSpec>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}
