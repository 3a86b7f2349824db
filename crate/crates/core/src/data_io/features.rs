//! Binary feature archive.
//!
//! Layout (little-endian): magic `SRCV`, version `u32 = 1`, `n_clips: u32`,
//! `n_modalities: u8`, then each modality name as `u8` length + UTF-8; then per
//! clip: `u16` id length + UTF-8 id, `segments: u32`, `dim: u32`, followed by
//! `n_modalities × segments × dim` `f32` values in declared modality order.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Pooling;

pub const FEATURE_MAGIC: &[u8; 4] = b"SRCV";
pub const FEATURE_VERSION: u32 = 1;

/// One clip: per-modality `segments × dim` row-major feature blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub id: String,
    pub segments: usize,
    pub dim: usize,
    pub modalities: Vec<Vec<f32>>,
}

impl ClipFeatures {
    pub fn modality_matrix(&self, m: usize) -> Result<Matrix> {
        if self.segments == 0 {
            return Err(Error::EmptyMatrix);
        }
        Matrix::new(
            self.segments,
            self.dim,
            self.modalities[m].iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    modalities: Vec<String>,
    clips: Vec<ClipFeatures>,
    index: HashMap<String, usize>,
}

impl FeatureArchive {
    pub fn new(modalities: Vec<String>, clips: Vec<ClipFeatures>) -> Result<Self> {
        if modalities.is_empty() || modalities.len() > u8::MAX as usize {
            return Err(Error::Config(format!(
                "archive needs 1..=255 modalities, got {}",
                modalities.len()
            )));
        }
        if let Some(name) = modalities.iter().find(|n| n.len() > u8::MAX as usize) {
            return Err(Error::Config(format!("modality name too long: {name:?}")));
        }
        let mut index = HashMap::with_capacity(clips.len());
        let dim = clips.first().map(|c| c.dim);
        for (i, c) in clips.iter().enumerate() {
            if c.id.len() > u16::MAX as usize {
                return Err(Error::Config(format!("clip id too long: {}", c.id)));
            }
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(c.id.clone()));
            }
            if c.segments == 0 || c.dim == 0 {
                return Err(Error::EmptyMatrix);
            }
            if Some(c.dim) != dim {
                return Err(Error::shape(format!(
                    "clip {} has dim {}, archive dim is {}",
                    c.id,
                    c.dim,
                    dim.unwrap_or(0)
                )));
            }
            if c.modalities.len() != modalities.len()
                || c.modalities.iter().any(|m| m.len() != c.segments * c.dim)
            {
                return Err(Error::shape(format!("clip {} payload does not match its shape", c.id)));
            }
            if c.modalities.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("clip {}", c.id)));
            }
        }
        Ok(Self {
            modalities,
            clips,
            index,
        })
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn clips(&self) -> &[ClipFeatures] {
        &self.clips
    }

    pub fn get(&self, id: &str) -> Option<&ClipFeatures> {
        self.index.get(id).map(|&i| &self.clips[i])
    }

    /// Feature width shared by every clip (0 for an empty archive).
    pub fn dim(&self) -> usize {
        self.clips.first().map_or(0, |c| c.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.clips.len() as u32).to_le_bytes());
        out.push(self.modalities.len() as u8);
        for name in &self.modalities {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
        }
        for c in &self.clips {
            out.extend_from_slice(&(c.id.len() as u16).to_le_bytes());
            out.extend_from_slice(c.id.as_bytes());
            out.extend_from_slice(&(c.segments as u32).to_le_bytes());
            out.extend_from_slice(&(c.dim as u32).to_le_bytes());
            for m in &c.modalities {
                for v in m {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let mut r = ByteReader::new(&bytes[4..], path);
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch(format!(
                "{}: feature archive version {version}, expected {FEATURE_VERSION}",
                path.display()
            )));
        }
        let n_clips = r.u32()? as usize;
        let n_mod = r.u8()? as usize;
        let mut modalities = Vec::with_capacity(n_mod);
        for _ in 0..n_mod {
            let len = r.u8()? as usize;
            modalities.push(r.string(len)?);
        }
        let mut clips = Vec::with_capacity(n_clips.min(1 << 20));
        for _ in 0..n_clips {
            let len = r.u16()? as usize;
            let id = r.string(len)?;
            let segments = r.u32()? as usize;
            let dim = r.u32()? as usize;
            let mut mods = Vec::with_capacity(n_mod);
            for _ in 0..n_mod {
                let count = segments
                    .checked_mul(dim)
                    .ok_or_else(|| Error::TruncatedPayload(path.to_path_buf()))?;
                let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::TruncatedPayload(path.to_path_buf()))?)?;
                let values: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue(path.to_path_buf()));
                }
                mods.push(values);
            }
            clips.push(ClipFeatures {
                id,
                segments,
                dim,
                modalities: mods,
            });
        }
        if !r.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "trailing bytes after last clip".into(),
            });
        }
        Self::new(modalities, clips).map_err(|e| match e {
            Error::DuplicateId(_) | Error::EmptyMatrix => e,
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: other.to_string(),
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn load_features(path: &Path) -> Result<FeatureArchive> {
    FeatureArchive::load(path)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::TruncatedPayload(self.path.to_path_buf()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            path: self.path.to_path_buf(),
            line: 0,
            msg: "invalid UTF-8 in name".into(),
        })
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Column-wise mean or max over the segment axis.
///
/// Each column is reduced in sorted order so the result is bit-identical under
/// any permutation of the segments.
pub fn temporal_pool(m: &Matrix, mode: Pooling) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut column = Vec::with_capacity(m.rows());
    Ok((0..m.cols())
        .map(|c| {
            column.clear();
            column.extend((0..m.rows()).map(|r| m.get(r, c)));
            match mode {
                Pooling::Max => column.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Pooling::Mean => {
                    column.sort_by(f64::total_cmp);
                    column.iter().sum::<f64>() / m.rows() as f64
                }
            }
        })
        .collect())
}
