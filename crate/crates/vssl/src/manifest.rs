//! Clip manifests: one JSON `ClipRecord` per line. Relative media paths are
//! resolved against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use vssl_core::data::{check_speaker_disjoint, ClipRecord};

use crate::error::{Error, Result};

pub fn parse(text: &str, path: &Path) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ClipRecord =
            serde_json::from_str(line).map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if r.audio_path.is_empty() {
            return Err(Error::Config(format!("{} line {}: clip '{}' has no audio_path", path.display(), i + 1, r.clip_id)));
        }
        if !seen.insert(r.clip_id.clone()) {
            return Err(Error::Config(format!("{} line {}: duplicate clip_id '{}'", path.display(), i + 1, r.clip_id)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: manifest has no records", path.display())));
    }
    check_speaker_disjoint(&out).map_err(Error::Invalid)?;
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

pub fn to_string(records: &[ClipRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serialises"));
        s.push('\n');
    }
    s
}

pub fn write(path: &Path, records: &[ClipRecord]) -> Result<()> {
    crate::fsio::write_atomic(path, to_string(records).as_bytes())
}

/// `p` itself when absolute, else relative to the manifest directory.
pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let q = Path::new(p);
    if q.is_absolute() {
        q.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(q)
    }
}
