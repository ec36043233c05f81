//! Parameter files: a JSON manifest next to a little-endian `f32` blob.
//!
//! `<path>` holds the manifest (model kind, a caller-defined header, and one
//! `{name, shape, offset}` entry per parameter, offsets in bytes);
//! `<path>.bin` holds the values back to back in manifest order.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile<H> {
    kind: String,
    header: H,
    params: Vec<ManifestEntry>,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".bin");
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn manifest(ps: &ParameterSet) -> Vec<ManifestEntry> {
    let mut offset = 0;
    ps.iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel() * 4;
            e
        })
        .collect()
}

pub fn to_blob(ps: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(ps.num_values() * 4);
    for p in ps.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_blob(entries: &[ManifestEntry], blob: &[u8]) -> Result<ParameterSet> {
    let mut ps = ParameterSet::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > blob.len() {
            return Err(Error::Input(format!("parameter {} runs past the end of the blob", e.name)));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if ps.id(&e.name).is_some() {
            return Err(Error::Input(format!("duplicate parameter {}", e.name)));
        }
        ps.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
    }
    let expected: usize = entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if expected != blob.len() {
        return Err(Error::Input(format!("blob holds {} bytes, manifest describes {expected}", blob.len())));
    }
    Ok(ps)
}

pub fn save_model<H: Serialize>(path: &Path, kind: &str, header: &H, ps: &ParameterSet) -> Result<()> {
    let file = ModelFile {
        kind: kind.to_string(),
        header,
        params: manifest(ps),
    };
    write_atomic(&blob_path(path), &to_blob(ps))?;
    write_atomic(path, &serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_model<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, ParameterSet)> {
    let file: ModelFile<H> = serde_json::from_slice(&fs::read(path)?)?;
    if file.kind != kind {
        return Err(Error::Config(format!(
            "{} holds a {} model, expected {kind}",
            path.display(),
            file.kind
        )));
    }
    let blob = fs::read(blob_path(path))?;
    let ps = from_blob(&file.params, &blob)?;
    Ok((file.header, ps))
}
