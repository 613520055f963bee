//! On-disk feature store: one little-endian `f32` array per clip plus a
//! JSON index `index.json` mapping clip id to file, shape, label and split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vssl_core::data::Split;
use vssl_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const INDEX: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affect_track: Option<Vec<f64>>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub version: u32,
    /// Identifies what produced the arrays, e.g. an encoder digest.
    pub source: String,
    pub clips: BTreeMap<String, IndexEntry>,
}

/// One clip's features with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredClip {
    pub clip_id: String,
    pub features: Tensor,
    pub label: Option<usize>,
    pub affect_track: Option<Vec<f64>>,
    pub split: Split,
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Write a complete store into `dir`, replacing any previous one. The
/// store is assembled in a sibling directory and renamed into place.
pub fn write_store(dir: &Path, source: &str, clips: &[StoredClip]) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().ok_or_else(|| Error::format(dir, "not a directory path"))?.to_string_lossy().into_owned();
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut sorted: Vec<&StoredClip> = clips.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut index = Index { version: 1, source: source.to_string(), clips: BTreeMap::new() };
    for (i, c) in sorted.iter().enumerate() {
        if c.features.ndim() != 2 {
            return Err(Error::Config(format!("clip '{}': features must be [t, d], got {:?}", c.clip_id, c.features.shape())));
        }
        let file = format!("{i:06}.f32");
        let p = tmp.join(&file);
        fs::write(&p, encode(&c.features)).map_err(|e| Error::io(&p, e))?;
        let entry = IndexEntry {
            file,
            shape: [c.features.dim(0), c.features.dim(1)],
            label: c.label,
            affect_track: c.affect_track.clone(),
            split: c.split,
        };
        if index.clips.insert(c.clip_id.clone(), entry).is_some() {
            return Err(Error::Config(format!("duplicate clip id '{}'", c.clip_id)));
        }
    }
    crate::fsio::write_json(&tmp.join(INDEX), &index)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_index(dir: &Path) -> Result<Index> {
    crate::fsio::read_json(&dir.join(INDEX))
}

/// Load every clip, ordered by clip id.
pub fn read_store(dir: &Path) -> Result<(Index, Vec<StoredClip>)> {
    let index = read_index(dir)?;
    let mut out = Vec::with_capacity(index.clips.len());
    for (id, e) in &index.clips {
        let p: PathBuf = dir.join(&e.file);
        let bytes = crate::fsio::read(&p)?;
        let n = e.shape[0] * e.shape[1];
        if bytes.len() != 4 * n {
            return Err(Error::format(&p, format!("shape {:?} needs {} bytes, found {}", e.shape, 4 * n, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        out.push(StoredClip {
            clip_id: id.clone(),
            features: Tensor::from_vec(&e.shape, data)?,
            label: e.label,
            affect_track: e.affect_track.clone(),
            split: e.split,
        });
    }
    Ok((index, out))
}
