//! Named-tensor weight files.
//!
//! Layout (little-endian): magic "VGZW", u32 version = 1, u32 tensor_count;
//! per tensor: u16 name_len, UTF-8 name, u8 ndim, u32 dims[ndim], f32 data
//! row-major. Values are stored at f32 precision regardless of in-memory
//! width.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"VGZW";
pub const WEIGHT_VERSION: u32 = 1;

/// Write one or more stores into a single file. Each store's parameter names
/// are prefixed so that jointly trained modules can share a file.
pub fn save_weights(path: &Path, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let count: usize = stores.iter().map(|(_, s)| s.len()).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, store) in stores {
        for (_, p) in store.iter() {
            let name = format!("{prefix}{}", p.name);
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.as_slice() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load stores from a file written by `save_weights`. Every parameter in
/// every store must be present with matching dims or nothing is changed;
/// tensors in the file that no store asks for are ignored with a warning.
pub fn load_weights(path: &Path, stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let entries = parse_entries(&bytes)?;

    // Stage every update before touching any store, so a failure can never
    // leave a partially loaded model.
    let mut staged: Vec<Vec<(crate::params::ParamId, Tensor)>> = Vec::new();
    let mut wanted: Vec<String> = Vec::new();
    for (prefix, store) in stores.iter() {
        let mut updates = Vec::new();
        for (id, p) in store.iter() {
            let name = format!("{prefix}{}", p.name);
            let entry = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if entry.dims != p.value.shape() {
                return Err(Error::DimMismatch {
                    name,
                    expected: p.value.shape().to_vec(),
                    found: entry.dims.clone(),
                });
            }
            updates.push((id, Tensor::from_vec(&entry.dims, entry.data.clone())?));
            wanted.push(name);
        }
        staged.push(updates);
    }
    for entry in &entries {
        if !wanted.iter().any(|w| w == &entry.name) {
            eprintln!("warning: ignoring unknown tensor {} in {}", entry.name, path.display());
        }
    }
    for ((_, store), updates) in stores.iter_mut().zip(staged) {
        for (id, value) in updates {
            *store.value_mut(id) = value;
        }
    }
    Ok(())
}

struct Entry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn parse_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4).ok_or(Error::BadMagic {
        expected: WEIGHT_MAGIC,
        found: short_magic(bytes),
    })?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur
        .take_u32()
        .ok_or_else(|| Error::CorruptLength("weight file ends inside header".into()))?;
    if version != WEIGHT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = cur
        .take_u32()
        .ok_or_else(|| Error::CorruptLength("weight file ends inside header".into()))?;

    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let fallback = format!("tensor[{i}]");
        let name_len = cur
            .take_u16()
            .ok_or_else(|| truncated(&fallback, &[]))? as usize;
        let name_bytes = cur.take(name_len).ok_or_else(|| truncated(&fallback, &[]))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::CorruptLength(format!("tensor name {i} is not UTF-8")))?;
        let ndim = cur.take(1).ok_or_else(|| truncated(&name, &[]))?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.take_u32().ok_or_else(|| truncated(&name, &dims))? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for j in 0..numel {
            let Some(raw) = cur.take(4) else {
                return Err(Error::DimMismatch {
                    name,
                    expected: dims,
                    found: vec![j],
                });
            };
            data.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64);
        }
        entries.push(Entry { name, dims, data });
    }
    Ok(entries)
}

fn truncated(name: &str, dims: &[usize]) -> Error {
    Error::DimMismatch {
        name: name.to_string(),
        expected: dims.to_vec(),
        found: vec![],
    }
}

pub(crate) fn short_magic(bytes: &[u8]) -> [u8; 4] {
    let mut m = [0u8; 4];
    for (i, &b) in bytes.iter().take(4).enumerate() {
        m[i] = b;
    }
    m
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Some(s)
    }

    pub(crate) fn take_u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn take_u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn take_f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
