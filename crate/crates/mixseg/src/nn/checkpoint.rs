//! Checkpoint archive: one file holding a JSON manifest followed by raw
//! little-endian `f32` arrays keyed by parameter path.
//!
//! Layout: 8-byte magic, u64 manifest length, manifest JSON, then the
//! concatenated arrays in manifest entry order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamKind, Scalar, Visit};

const MAGIC: &[u8; 8] = b"MSEGCKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Opaque network/run configuration blob.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub seed: u64,
    pub has_loc_branch: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    path: String,
    kind: ParamKind,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    manifest: CheckpointManifest,
    entries: Vec<Entry>,
}

/// Serialize every array of `module` (parameters and running statistics).
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    manifest: &CheckpointManifest,
    module: &mut impl Visit<S>,
) -> Result<(), NnError> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    module.visit(
        "",
        &mut |p: &str, kind: ParamKind, data: &mut [S], _: Option<&mut [S]>| {
            entries.push(Entry { path: p.to_string(), kind, len: data.len() });
            for v in data.iter() {
                blob.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        },
    );
    let header = Header { version: 1, manifest: manifest.clone(), entries };
    let hjson = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)?;
    serde_json::from_slice(&hjson).map_err(|e| NnError::Format(e.to_string()))
}

/// Read just the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_header(&mut r)?.manifest)
}

/// Load arrays into `module` by path. Entries stored in the file but not
/// present in the module are skipped (a full checkpoint loads into a model
/// whose localization branch was stripped); a module array with no matching
/// entry is an error.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    module: &mut impl Visit<S>,
) -> Result<CheckpointManifest, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut offsets = std::collections::HashMap::new();
    let mut off = 0usize;
    for e in &header.entries {
        offsets.insert(e.path.clone(), (off, e.len));
        off += e.len * 4;
    }
    if blob.len() != off {
        return Err(NnError::Format(format!(
            "checkpoint data length {} does not match entries ({})",
            blob.len(),
            off
        )));
    }
    let mut missing: Vec<String> = Vec::new();
    module.visit(
        "",
        &mut |p: &str, _k: ParamKind, data: &mut [S], _: Option<&mut [S]>| {
            match offsets.get(p) {
                Some(&(start, len)) if len == data.len() => {
                    for (i, v) in data.iter_mut().enumerate() {
                        let b = &blob[start + i * 4..start + i * 4 + 4];
                        *v = S::of_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
                    }
                }
                Some(_) => missing.push(format!("{p} (length mismatch)")),
                None => missing.push(p.to_string()),
            }
        },
    );
    if let Some(m) = missing.first() {
        return Err(NnError::MissingEntry(m.clone()));
    }
    Ok(header.manifest)
}
