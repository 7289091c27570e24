//! Weight dumps: a flat little-endian f64 blob plus a JSON manifest listing
//! every tensor's name, shape, byte offset, and content hash. Round trips are
//! bit-exact; hashes are verified on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT: &str = "dprompt-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the weight blob, in f64 elements.
    pub offset: usize,
    pub len: usize,
    pub fnv64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Write `store` into `dir/manifest.json` + `dir/weights.bin`.
pub fn save(dir: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        let start = blob.len();
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            offset,
            len: p.data.len(),
            fnv64: format!("{:016x}", fnv64(&blob[start..])),
        });
        offset += p.data.len();
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        meta,
        tensors,
    };
    let mut f = fs::File::create(dir.join("weights.bin"))?;
    f.write_all(&blob)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint directory back into a store, verifying every hash.
pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let start = t.offset * 8;
        let end = start + t.len * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` runs past the end of the weight blob",
                t.name
            )));
        }
        let bytes = &blob[start..end];
        let got = format!("{:016x}", fnv64(bytes));
        if got != t.fnv64 {
            return Err(Error::Checkpoint(format!(
                "hash mismatch for `{}`: manifest {} vs data {got}",
                t.name, t.fnv64
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&t.name, t.shape.clone(), data);
    }
    Ok((store, manifest.meta))
}
