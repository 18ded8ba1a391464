//! Single-file parameter archives.
//!
//! Layout: the 8-byte magic `DMCVRCKP`, a little-endian `u32` version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then the raw
//! little-endian tensor bytes in registration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::Real;

const MAGIC: &[u8; 8] = b"DMCVRCKP";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed archive header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a parameter archive (bad magic or version)")]
    BadMagic,
    #[error("dtype mismatch: archive holds {found}, expected {expected}")]
    Dtype { found: String, expected: String },
    #[error("tensor layout mismatch at `{0}`")]
    Layout(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    manifest: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Namespace for reading and writing [`ParamStore`] archives.
pub struct Archive;

impl Archive {
    pub fn write<T: Real>(
        path: &Path,
        store: &ParamStore<T>,
        manifest: &serde_json::Value,
    ) -> Result<(), ArchiveError> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            manifest: manifest.clone(),
            tensors: store
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, p) in store.iter() {
            buf.clear();
            for &v in p.value.iter() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Manifest of an archive without reading any tensor data.
    pub fn read_manifest(path: &Path) -> Result<serde_json::Value, ArchiveError> {
        let mut r = BufReader::new(File::open(path)?);
        Ok(read_header(&mut r)?.manifest)
    }

    /// Loads values into a store whose names and shapes match the archive.
    /// Returns the stored manifest.
    pub fn read_into<T: Real>(
        path: &Path,
        store: &mut ParamStore<T>,
    ) -> Result<serde_json::Value, ArchiveError> {
        let mut r = BufReader::new(File::open(path)?);
        let header = read_header(&mut r)?;
        if header.dtype != T::DTYPE {
            return Err(ArchiveError::Dtype {
                found: header.dtype,
                expected: T::DTYPE.to_string(),
            });
        }
        if header.tensors.len() != store.len() {
            return Err(ArchiveError::Layout(format!(
                "{} tensors in archive, {} in model",
                header.tensors.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (entry, id) in header.tensors.iter().zip(ids) {
            let p = store.get(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(ArchiveError::Layout(entry.name.clone()));
            }
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * T::BYTES];
            r.read_exact(&mut bytes)?;
            let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            *store.value_mut(id) = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|_| ArchiveError::Layout(entry.name.clone()))?;
        }
        Ok(header.manifest)
    }
}

fn read_header(r: &mut impl Read) -> Result<Header, ArchiveError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    if &magic != MAGIC || u32::from_le_bytes(ver) != VERSION {
        return Err(ArchiveError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}
