//! Checkpoint directories: `header.json`, `tensors.idx` (JSON index) and
//! `tensors.bin` (raw little-endian payload, tensors back to back).

use std::fs;
use std::path::Path;

use duin_core::{DType, ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io, json, Error, Result};

/// Bumped whenever the layout changes; older files are rejected.
pub const FORMAT_VERSION: u32 = 1;

pub const HEADER_FILE: &str = "header.json";
pub const INDEX_FILE: &str = "tensors.idx";
pub const PAYLOAD_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    /// "vqvae", "mae" or "classifier".
    pub stage: String,
    pub epoch: usize,
    pub metrics: Value,
    /// Geometry needed to rebuild the model.
    pub model: Value,
    /// The resolved run configuration that produced the file.
    pub config: Value,
}

impl Header {
    pub fn new(stage: &str, epoch: usize, metrics: Value, model: Value, config: Value) -> Self {
        Self { format_version: FORMAT_VERSION, stage: stage.into(), epoch, metrics, model, config }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_store(header: Header, store: &ParamStore<T>) -> Self {
        Self { header, tensors: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Copies every tensor whose name exists in `store`; returns the unused names.
    pub fn load_into(&self, store: &mut ParamStore<T>) -> Result<Vec<String>> {
        Ok(store.load_matching(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))?)
    }

    /// Index and payload bytes.
    pub fn encode_tensors(&self) -> Result<(Vec<IndexEntry>, Vec<u8>)> {
        let width = std::mem::size_of::<T>();
        let (mut index, mut payload) = (Vec::with_capacity(self.tensors.len()), Vec::new());
        for (name, t) in &self.tensors {
            if index.iter().any(|e: &IndexEntry| e.name == *name) {
                return Err(Error::Format { path: PAYLOAD_FILE.into(), msg: format!("duplicate tensor `{name}`") });
            }
            let start = payload.len() as u64;
            for &v in t.data() {
                match T::DTYPE {
                    DType::F32 => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    DType::F64 => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
            index.push(IndexEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                dims: t.shape().to_vec(),
                byte_offset: start,
                byte_len: (t.numel() * width) as u64,
            });
        }
        Ok((index, payload))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let (index, payload) = self.encode_tensors()?;
        write_json(&dir.join(HEADER_FILE), &self.header)?;
        write_json(&dir.join(INDEX_FILE), &index)?;
        let p = dir.join(PAYLOAD_FILE);
        fs::write(&p, payload).map_err(io(&p))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header = read_header(dir)?;
        let ipath = dir.join(INDEX_FILE);
        let index: Vec<IndexEntry> = read_json(&ipath)?;
        let ppath = dir.join(PAYLOAD_FILE);
        let payload = fs::read(&ppath).map_err(io(&ppath))?;
        let tensors = decode_tensors(&ppath, &index, &payload)?;
        Ok(Self { header, tensors })
    }
}

/// Reads and version-checks `header.json` alone.
pub fn read_header(dir: &Path) -> Result<Header> {
    let hpath = dir.join(HEADER_FILE);
    if !hpath.exists() {
        return Err(Error::Prerequisite(format!("no checkpoint at {}", dir.display())));
    }
    let raw: Value = read_json(&hpath)?;
    let found = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version { path: hpath, found, supported: FORMAT_VERSION });
    }
    serde_json::from_value(raw).map_err(json(&hpath))
}

pub fn decode_tensors<T: Real>(path: &Path, index: &[IndexEntry], payload: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let fail = |msg: String| Error::Format { path: path.into(), msg };
    let mut out: Vec<(String, Tensor<T>)> = Vec::with_capacity(index.len());
    for e in index {
        if out.iter().any(|(n, _)| *n == e.name) {
            return Err(fail(format!("duplicate tensor `{}`", e.name)));
        }
        if e.dtype != T::DTYPE {
            return Err(fail(format!("tensor `{}` is {:?}, expected {:?}", e.name, e.dtype, T::DTYPE)));
        }
        let width = std::mem::size_of::<T>() as u64;
        let numel: usize = e.dims.iter().product();
        if e.byte_len != numel as u64 * width {
            return Err(fail(format!("tensor `{}`: {} bytes do not match dims {:?}", e.name, e.byte_len, e.dims)));
        }
        let end = e.byte_offset.checked_add(e.byte_len).filter(|&end| end <= payload.len() as u64);
        let Some(end) = end else {
            return Err(Error::Truncated { path: path.into(), expected: e.byte_offset.saturating_add(e.byte_len), found: payload.len() as u64 });
        };
        let bytes = &payload[e.byte_offset as usize..end as usize];
        let data: Vec<T> = match T::DTYPE {
            DType::F32 => bytes.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap()))).collect(),
        };
        out.push((e.name.clone(), Tensor::new(&e.dims, data)?));
    }
    Ok(out)
}

pub(crate) fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(json(path))?;
    fs::write(path, text + "\n").map_err(io(path))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(json(path))
}
