//! Single-file model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "BNTACKPT"
//! 8       4     format version (u32 LE)
//! 12      8     header length L (u64 LE)
//! 20      L     JSON header: tool version, seed, model config, tensor index
//! 20+L    ...   tensor blobs in index order (bnta_core::blob encoding)
//! ```
//!
//! Every index entry carries the tensor's name, group, shape, byte range
//! relative to the end of the header and the SHA-256 of its blob, so two
//! checkpoints can be compared tensor by tensor without decoding.

use std::collections::BTreeMap;
use std::path::Path;

use bnta_core::blob;
use bnta_core::layers::ParamGroup;
use bnta_core::model::{ModelBundle, ModelConfig};
use bnta_core::rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{self, Error, Result};

pub const MAGIC: &[u8; 8] = b"BNTACKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub tool_version: String,
    /// Seed the model was initialized and trained from.
    pub seed: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub model: ModelBundle,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize `model` with its provenance seed.
pub fn to_bytes(model: &ModelBundle, seed: u64) -> Vec<u8> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        let start = blobs.len();
        blob::encode_into(&p.value, &mut blobs);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            offset: start as u64,
            length: (blobs.len() - start) as u64,
            sha256: sha256_hex(&blobs[start..]),
        });
    }
    let header = Header {
        tool_version: crate::TOOL_VERSION.into(),
        seed,
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out
}

/// Decode a checkpoint; `origin` names the source in error messages.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| Error::format(origin, msg);
    if bytes.len() < PREAMBLE {
        return Err(fail(format!("truncated: {} bytes, need at least {PREAMBLE}", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "checkpoint format version {version}, this tool reads version {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body_start = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(PREAMBLE))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail(format!("truncated: header of {header_len} bytes does not fit")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body_start])
        .map_err(|e| fail(format!("header: {e}")))?;
    let body = &bytes[body_start..];

    // Parameter values are all overwritten below; the init stream only
    // builds the architecture.
    let mut model = ModelBundle::new(header.config.clone(), &mut rng::stream(header.seed, "init"))?;
    let expected: Vec<(String, ParamGroup)> = model.params().iter().map(|p| (p.name.clone(), p.group)).collect();
    let listed: Vec<(String, ParamGroup)> = header.tensors.iter().map(|t| (t.name.clone(), t.group)).collect();
    if expected != listed {
        return Err(fail(format!(
            "tensor index ({} entries) does not match the architecture ({} tensors)",
            listed.len(),
            expected.len()
        )));
    }
    let mut consumed = 0u64;
    for entry in &header.tensors {
        let range = usize::try_from(entry.offset)
            .ok()
            .zip(usize::try_from(entry.length).ok())
            .and_then(|(o, l)| Some(o..o.checked_add(l)?))
            .filter(|r| r.end <= body.len())
            .ok_or_else(|| fail(format!("truncated: tensor {} lies past the end of the file", entry.name)))?;
        let raw = &body[range];
        if sha256_hex(raw) != entry.sha256 {
            return Err(fail(format!("tensor {}: content hash mismatch", entry.name)));
        }
        let (tensor, used) = blob::decode(raw).map_err(|e| fail(format!("tensor {}: {e}", entry.name)))?;
        if used != raw.len() || tensor.shape() != entry.shape.as_slice() {
            return Err(fail(format!("tensor {}: blob does not match its index entry", entry.name)));
        }
        model
            .set_param(&entry.name, tensor)
            .map_err(|e| fail(format!("shape mismatch against the config: {e}")))?;
        consumed = consumed.max(entry.offset + entry.length);
    }
    if consumed != body.len() as u64 {
        return Err(fail(format!("{} trailing bytes after the last tensor", body.len() as u64 - consumed)));
    }
    Ok(Checkpoint { header, model })
}

pub fn save(model: &ModelBundle, seed: u64, path: &Path) -> Result<()> {
    error::write(path, &to_bytes(model, seed))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&error::read(path)?, path)
}

/// SHA-256 of every tensor's encoded blob, by name.
pub fn tensor_hashes(model: &ModelBundle) -> BTreeMap<String, String> {
    model
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), sha256_hex(&blob::encode(&p.value))))
        .collect()
}

/// One tensor whose content differs between two models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorChange {
    pub name: String,
    pub group: ParamGroup,
}

/// Tensors whose hashes differ. Both models must share an architecture.
pub fn diff(before: &ModelBundle, after: &ModelBundle) -> Result<Vec<TensorChange>> {
    if before.config() != after.config() {
        return Err(Error::Config("cannot diff checkpoints of different architectures".into()));
    }
    let old = tensor_hashes(before);
    Ok(after
        .params()
        .into_iter()
        .filter(|p| old.get(&p.name) != Some(&sha256_hex(&blob::encode(&p.value))))
        .map(|p| TensorChange {
            name: p.name.clone(),
            group: p.group,
        })
        .collect())
}
