//! Binary parameter archive plus a JSON sidecar manifest.
//!
//! Archive layout (little endian): magic `SEERPARM`, `u32` version, `u32`
//! entry count, then per entry: `u32` name length, UTF-8 name, `u32` rank,
//! `u64` dims, `f64` data. Entries are written in lexical name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelHandle, SubsampleMask};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"SEERPARM";
const VERSION: u32 = 1;

pub fn encode_archive(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_archive(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("missing archive magic"));
    }
    if r.u32() != Some(VERSION) {
        return Err(bad("unsupported archive version"));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
        let name = r.take(len).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r
            .take(n.checked_mul(8).ok_or_else(|| bad("oversized tensor"))?)
            .ok_or_else(|| bad("truncated data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn write_archive(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    write_atomic(path, &encode_archive(tensors))
}

pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_archive(&fs::read(path)?, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    pub arch_id: String,
    pub seed: u64,
    pub param_order: Vec<String>,
    #[serde(default)]
    pub mask: Option<SubsampleMask>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// `(archive, manifest)` paths for a checkpoint stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let name = stem
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    (
        stem.with_file_name(format!("{name}.params")),
        stem.with_file_name(format!("{name}.manifest.json")),
    )
}

pub fn save_checkpoint(
    stem: &Path,
    model: &ModelHandle,
    mask: Option<&SubsampleMask>,
    config_hash: Option<&str>,
) -> Result<()> {
    let (archive, manifest_path) = checkpoint_paths(stem);
    write_archive(&archive, model.params())?;
    let manifest = CheckpointManifest {
        architecture: model.architecture().clone(),
        arch_id: model.arch_id(),
        seed: model.seed(),
        param_order: model.param_names().map(String::from).collect(),
        mask: mask.cloned(),
        config_hash: config_hash.map(String::from),
    };
    write_atomic(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_checkpoint(stem: &Path) -> Result<(ModelHandle, CheckpointManifest)> {
    let (archive, manifest_path) = checkpoint_paths(stem);
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| Error::Format {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
    if manifest.arch_id != manifest.architecture.id() {
        return Err(Error::Format {
            path: manifest_path,
            reason: "arch_id does not match architecture".into(),
        });
    }
    let params = read_archive(&archive)?;
    if params.keys().ne(manifest.param_order.iter()) {
        return Err(Error::Format {
            path: archive,
            reason: "parameter order differs from manifest".into(),
        });
    }
    let model = ModelHandle::from_params(manifest.architecture.clone(), manifest.seed, params)?;
    if let Some(mask) = &manifest.mask {
        mask.fits(&model)?;
    }
    Ok((model, manifest))
}
