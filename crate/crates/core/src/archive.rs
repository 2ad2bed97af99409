//! Flat binary archive of named arrays plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"AGPARCH1"
//! u64            header length in bytes
//! [u8]           UTF-8 JSON header {"meta": {..}, "arrays": [{name, dtype, shape, offset}]}
//! [u8]           array payload, each array contiguous row-major
//! [u8; 32]       SHA-256 of every preceding byte
//! ```
//!
//! Namespaces are name prefixes (`encoder/`, `decoder/`, `teacher/`, ...).
//! Writes go to a sibling temp file and are renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;

const MAGIC: &[u8; 8] = b"AGPARCH1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, Value>,
    arrays: Vec<Entry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    meta: BTreeMap<String, Value>,
    arrays: BTreeMap<String, (Dtype, ArrayD<f64>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::load(format!("missing metadata key {key}"), vec![]))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: Dtype, value: ArrayD<f64>) {
        self.arrays.insert(name.into(), (dtype, value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name).map(|(_, a)| a)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    /// Store every array of `params` under `namespace/`.
    pub fn put_params(&mut self, namespace: &str, params: &ParamSet, dtype: Dtype) {
        for (name, a) in params.iter() {
            self.insert(format!("{namespace}/{name}"), dtype, a.clone());
        }
    }

    /// Collect the arrays under `namespace/` with the prefix stripped.
    pub fn params(&self, namespace: &str) -> ParamSet {
        let prefix = format!("{namespace}/");
        let mut out = ParamSet::new();
        for (name, (_, a)) in &self.arrays {
            if let Some(rest) = name.strip_prefix(&prefix) {
                out.insert(rest, a.clone());
            }
        }
        out
    }

    pub fn has_namespace(&self, namespace: &str) -> bool {
        let prefix = format!("{namespace}/");
        self.arrays.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0usize;
        for (name, (dtype, a)) in &self.arrays {
            entries.push(Entry {
                name: name.clone(),
                dtype: *dtype,
                shape: a.shape().to_vec(),
                offset,
            });
            offset += a.len() * dtype.size();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + offset + 32);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (dtype, a) in self.arrays.values() {
            match dtype {
                Dtype::F64 => a.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => a
                    .iter()
                    .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::load(why.to_string(), vec![]);
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(corrupt("archive truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or corrupted archive)"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])?;
        let payload = &body[header_end..];
        let mut arrays = BTreeMap::new();
        let mut bad = Vec::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * e.dtype.size();
            if end > payload.len() {
                bad.push(e.name);
                continue;
            }
            let raw = &payload[e.offset..end];
            let values: Vec<f64> = match e.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let a = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| Error::load(err.to_string(), vec![e.name.clone()]))?;
            arrays.insert(e.name, (e.dtype, a));
        }
        if !bad.is_empty() {
            return Err(Error::load("array payload out of range", bad));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    /// Write atomically: temp file in the same directory, fsync, rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.set_meta("variant", "toy_vit").unwrap();
        a.insert(
            "decoder/w",
            Dtype::F64,
            ArrayD::from_shape_fn(IxDyn(&[2, 3]), |d| d[0] as f64 * 0.1 + d[1] as f64 / 3.0),
        );
        a.insert("encoder/b", Dtype::F32, ArrayD::from_elem(IxDyn(&[4]), 0.5));
        a
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.params("decoder").len(), 1);
        assert!(b.has_namespace("encoder"));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [1, 10, bytes.len() / 2] {
            let err = Archive::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, Error::Load { .. }), "{err}");
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.agp");
        sample().write(&p).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert_eq!(Archive::read(&p).unwrap(), sample());
    }
}
