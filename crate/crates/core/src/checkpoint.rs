//! Checkpoint format: a JSON manifest (name, dtype, shape per tensor, plus
//! free-form metadata) followed by the raw little-endian row-major buffers
//! in manifest order. Loading validates every shape against the
//! architecture being restored into.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elem::{Dtype, Elem};
use crate::glvm::{GlvmConfig, GlvmWeights};

const MAGIC: &[u8; 8] = b"GLVMCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("tensor {name}: dtype {got:?} does not match requested {want:?}")]
    DtypeMismatch { name: String, want: Dtype, got: Dtype },
    #[error("tensor {name}: shape {got:?} does not match architecture shape {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("architecture: {0}")]
    Architecture(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// Write named buffers plus optional metadata.
pub fn save_tensors<E: Elem>(
    path: &Path,
    meta: Option<serde_json::Value>,
    tensors: &[(String, Vec<usize>, Vec<E>)],
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                dtype: E::DTYPE,
                shape: shape.clone(),
            })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(mjson.len() as u64).to_le_bytes())?;
    f.write_all(&mjson)?;
    for (_, _, data) in tensors {
        for v in data {
            f.write_all(&v.to_le_bytes_vec())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Raw checkpoint contents before shape validation.
pub struct Loaded {
    pub meta: Option<serde_json::Value>,
    pub tensors: Vec<(String, Dtype, Vec<usize>, Vec<u8>)>,
}

pub fn load_raw(path: &Path) -> Result<Loaded, CheckpointError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mlen = u64::from_le_bytes(len) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)?;
    let manifest: Manifest =
        serde_json::from_slice(&mjson).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let nbytes = e.shape.iter().product::<usize>() * e.dtype.size_bytes();
        let mut buf = vec![0u8; nbytes];
        f.read_exact(&mut buf)?;
        tensors.push((e.name, e.dtype, e.shape, buf));
    }
    Ok(Loaded {
        meta: manifest.meta,
        tensors,
    })
}

fn decode<E: Elem>(name: &str, dtype: Dtype, bytes: &[u8]) -> Result<Vec<E>, CheckpointError> {
    if dtype != E::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            name: name.to_string(),
            want: E::DTYPE,
            got: dtype,
        });
    }
    let sz = dtype.size_bytes();
    Ok(bytes.chunks_exact(sz).map(E::from_le_slice).collect())
}

/// Save a full weight set; the config rides along as manifest metadata.
pub fn save_weights<E: Elem>(path: &Path, w: &GlvmWeights<E>) -> Result<(), CheckpointError> {
    let meta = serde_json::from_str(&w.cfg.to_json())
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let tensors: Vec<(String, Vec<usize>, Vec<E>)> = w
        .entries()
        .map(|(d, t)| (d.name.clone(), d.shape.clone(), t.to_vec()))
        .collect();
    save_tensors(path, Some(meta), &tensors)
}

/// Load weights, rebuilding the architecture from the embedded config (or
/// the supplied one) and validating every tensor's shape against it.
pub fn load_weights<E: Elem>(
    path: &Path,
    cfg: Option<GlvmConfig>,
) -> Result<GlvmWeights<E>, CheckpointError> {
    let loaded = load_raw(path)?;
    let cfg = match cfg {
        Some(c) => c,
        None => {
            let meta = loaded
                .meta
                .as_ref()
                .ok_or_else(|| CheckpointError::Architecture("checkpoint has no embedded config".into()))?;
            GlvmConfig::from_json(&meta.to_string())
                .map_err(|e| CheckpointError::Architecture(e.to_string()))?
        }
    };
    let descs = crate::glvm::weight_descs(&cfg)
        .map_err(|e| CheckpointError::Architecture(e.to_string()))?;
    let expect: HashMap<&str, &Vec<usize>> =
        descs.iter().map(|d| (d.name.as_str(), &d.shape)).collect();
    let mut values = HashMap::with_capacity(loaded.tensors.len());
    for (name, dtype, shape, bytes) in &loaded.tensors {
        match expect.get(name.as_str()) {
            Some(want) if *want == shape => {}
            Some(want) => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    want: (*want).clone(),
                    got: shape.clone(),
                })
            }
            None => {
                return Err(CheckpointError::Architecture(format!(
                    "tensor {name} not part of the architecture"
                )))
            }
        }
        values.insert(name.clone(), decode::<E>(name, *dtype, bytes)?);
    }
    GlvmWeights::from_named(cfg, values).map_err(|e| CheckpointError::Architecture(e.to_string()))
}
