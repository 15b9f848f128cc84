//! Parameter checkpoints: a JSON manifest listing each tensor's name, shape
//! and byte offset, next to a raw little-endian f64 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub entries: Vec<CheckpointEntry>,
}

const FORMAT: &str = "f64-le";

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write `params` to `manifest_path` (JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(params: &ParamStore, manifest_path: &Path) -> Result<()> {
    let blob_file = blob_path(manifest_path);
    let mut blob = Vec::with_capacity(params.scalar_count() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Parse {
            file: manifest_path.display().to_string(),
            line: 1,
            msg: format!("unsupported checkpoint format {}", manifest.format),
        });
    }
    let blob_file = manifest_path
        .parent()
        .map(|d| d.join(&manifest.blob))
        .unwrap_or_else(|| PathBuf::from(&manifest.blob));
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let mut store = ParamStore::new();
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > blob.len() {
            return Err(Error::Parse {
                file: blob_file.display().to_string(),
                line: 0,
                msg: format!("tensor {} runs past end of blob", e.name),
            });
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(store)
}
