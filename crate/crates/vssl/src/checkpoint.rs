//! Single-file parameter checkpoints.
//!
//! Layout: the 8 magic bytes `VSSLCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the payload. The header carries a free-form `meta` object (the
//! configuration echo and training curves) and one entry per tensor with
//! its name, shape, trainable flag, byte offset into the payload and the
//! SHA-256 of its bytes. Tensor data is little-endian `f32`, row-major.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vssl_core::params::ParamStore;
use vssl_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VSSLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Core(vssl_core::Error::Checkpoint(format!("{}: {msg}", path.display())))
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialise `store` with its metadata. Values are narrowed to `f32`.
pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for e in store.entries() {
        let start = payload.len();
        for &v in e.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
            offset: start as u64,
            sha256: hex(&payload[start..]),
        });
    }
    let header = serde_json::to_vec(&Header { version: VERSION, meta: meta.clone(), tensors }).expect("header serialises");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    crate::fsio::write_atomic(path, &encode(store, meta))
}

/// An open checkpoint: the parsed header plus the file it came from.
pub struct Checkpoint {
    pub header: Header,
    file: File,
    payload_start: u64,
    payload_len: u64,
    path: std::path::PathBuf,
}

impl Checkpoint {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut fixed = [0u8; 20];
        file.read_exact(&mut fixed).map_err(|_| corrupt(path, "truncated preamble"))?;
        if &fixed[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(path, format!("format version {version}, this build reads {VERSION}")));
        }
        let hlen = u64::from_le_bytes(fixed[12..20].try_into().expect("8 bytes"));
        if hlen > total.saturating_sub(20) {
            return Err(corrupt(path, "header length exceeds file size"));
        }
        let mut hbytes = vec![0u8; hlen as usize];
        file.read_exact(&mut hbytes).map_err(|_| corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&hbytes).map_err(|e| corrupt(path, format!("header: {e}")))?;
        let payload_start = 20 + hlen;
        let ck = Checkpoint { header, file, payload_start, payload_len: total - payload_start, path: path.to_path_buf() };
        let mut expect = 0u64;
        for t in &ck.header.tensors {
            if t.offset != expect {
                return Err(corrupt(path, format!("tensor '{}' at offset {}, expected {expect}", t.name, t.offset)));
            }
            expect += 4 * t.shape.iter().product::<usize>() as u64;
        }
        if expect != ck.payload_len {
            return Err(corrupt(path, format!("payload is {} bytes, tensors need {expect}", ck.payload_len)));
        }
        Ok(ck)
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    fn read_entry(&mut self, t: &TensorEntry) -> Result<Tensor> {
        let n: usize = t.shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        self.file.seek(SeekFrom::Start(self.payload_start + t.offset)).map_err(|e| Error::io(&self.path, e))?;
        self.file.read_exact(&mut buf).map_err(|_| corrupt(&self.path, format!("tensor '{}' truncated", t.name)))?;
        if hex(&buf) != t.sha256 {
            return Err(corrupt(&self.path, format!("tensor '{}' fails its checksum", t.name)));
        }
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Ok(Tensor::from_vec(&t.shape, data)?)
    }

    /// Every tensor whose name starts with `prefix`, as a fresh store.
    pub fn load_prefix(&mut self, prefix: &str) -> Result<ParamStore> {
        let entries: Vec<TensorEntry> = self.header.tensors.iter().filter(|t| t.name.starts_with(prefix)).cloned().collect();
        if entries.is_empty() {
            return Err(corrupt(&self.path, format!("no tensors under '{prefix}'")));
        }
        let mut store = ParamStore::new();
        for t in &entries {
            let v = self.read_entry(t)?;
            store.add(&t.name, v, t.trainable);
        }
        Ok(store)
    }

    pub fn load_all(&mut self) -> Result<ParamStore> {
        self.load_prefix("")
    }
}
