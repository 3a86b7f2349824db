//! Model checkpoints: a JSON manifest next to a raw little-endian `f64` payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::ByteReader;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, ModelParams};
use crate::nn::ParamTree;

pub const CHECKPOINT_FORMAT: &str = "roleret-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const PAYLOAD_MAGIC: &[u8; 4] = b"SRCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
}

/// Payload path for a manifest path: same stem, `.bin` extension.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn tensor_index(params: &ModelParams) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    params.visit("", &mut |name, m| {
        out.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
        })
    });
    out
}

pub fn save_checkpoint(params: &ModelParams, manifest_path: &Path) -> Result<()> {
    let payload = payload_path(manifest_path);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config,
        payload: payload
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors: tensor_index(params),
    };
    let mut bytes = Vec::with_capacity(8 + 8 * params.num_values());
    bytes.extend_from_slice(PAYLOAD_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    params.visit("", &mut |_, m| {
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
    std::fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<ModelParams> {
    let text = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&text).map_err(|_| Error::BadMagic(manifest_path.to_path_buf()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::BadMagic(manifest_path.to_path_buf()));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(Error::VersionMismatch(format!(
            "{}: checkpoint version {version:?}, expected {CHECKPOINT_VERSION}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::VersionMismatch(format!("{}: {e}", manifest_path.display())))?;
    let mut params = ModelParams::init(&manifest.config)
        .map_err(|e| Error::VersionMismatch(format!("{}: {e}", manifest_path.display())))?;
    if tensor_index(&params) != manifest.tensors {
        return Err(Error::VersionMismatch(format!(
            "{}: tensor index does not match the configured architecture",
            manifest_path.display()
        )));
    }

    let payload = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&manifest.payload);
    let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    if bytes.len() < 4 || &bytes[..4] != PAYLOAD_MAGIC {
        return Err(Error::BadMagic(payload));
    }
    let mut r = ByteReader::new(&bytes[4..], &payload);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: payload version {version}, expected {CHECKPOINT_VERSION}",
            payload.display()
        )));
    }
    let mut failure = None;
    params.visit_mut("", &mut |_, m: &mut Matrix| {
        if failure.is_some() {
            return;
        }
        match r.take(8 * m.len()) {
            Ok(raw) => {
                for (dst, b) in m.as_mut_slice().iter_mut().zip(raw.chunks_exact(8)) {
                    *dst = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
                }
                if !m.is_finite() {
                    failure = Some(Error::NonFiniteValue(payload.clone()));
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !r.is_empty() {
        return Err(Error::VersionMismatch(format!(
            "{}: payload is longer than the tensor index",
            payload.display()
        )));
    }
    Ok(params)
}
