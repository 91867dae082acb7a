//! The shared checkpoint container.
//!
//! A checkpoint is a directory holding `manifest.json` (tensor names, shapes,
//! dtype, byte offsets, free-form metadata) and `tensors.bin`, a flat
//! little-endian f32 array in manifest order. Optional JSON sidecars (for
//! example the dictionary label list) live next to them. Each module writes
//! under its own namespace: `dictionary/`, `denoiser/`, `backbone/`,
//! `scorer/`, `encoder/`, `offsets/`, `optimizer/`.
//!
//! Saves are atomic: everything is written to a sibling temp directory which
//! is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use indexmap::IndexMap;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{flat_f32, ParamTable};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";
const FORMAT_TAG: &str = "tunenc-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset in elements (not bytes) into the data file.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub sidecars: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    tensors: IndexMap<String, (Vec<usize>, Vec<f32>)>,
    metadata: serde_json::Map<String, serde_json::Value>,
    sidecars: IndexMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("tensor {name}: shape {shape:?} does not match {} values", data.len())));
        }
        self.tensors.insert(name, (shape, data));
        Ok(())
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.put_raw(name, t.dims().to_vec(), flat_f32(t)?)
    }

    pub fn raw(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.raw(name)?;
        Ok(Tensor::from_vec(data.to_vec(), shape, &Device::Cpu)?)
    }

    pub fn has_namespace(&self, ns: &str) -> bool {
        let p = format!("{ns}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn put_params(&mut self, ns: &str, params: &ParamTable) -> Result<()> {
        for (name, var) in params.vars() {
            self.put_tensor(format!("{ns}/{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    /// Collect every tensor under `ns/` into a (frozen) parameter table, in stored order.
    pub fn params(&self, ns: &str) -> Result<ParamTable> {
        let prefix = format!("{ns}/");
        let mut table = ParamTable::new();
        for (name, (shape, data)) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&prefix) {
                table.insert(rest, Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?)?;
            }
        }
        if table.is_empty() {
            return Err(Error::Format(format!("checkpoint has no `{ns}` section")));
        }
        Ok(table)
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata key {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.metadata.contains_key(key)
    }

    pub fn put_sidecar<T: Serialize>(&mut self, file_name: &str, value: &T) -> Result<()> {
        self.sidecars.insert(file_name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn sidecar<T: DeserializeOwned>(&self, file_name: &str) -> Result<T> {
        let v = self
            .sidecars
            .get(file_name)
            .ok_or_else(|| Error::Format(format!("missing sidecar {file_name}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Copy every tensor, metadata key and sidecar of `other` into `self`.
    pub fn absorb(&mut self, other: &Checkpoint) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.metadata {
            self.metadata.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.sidecars {
            self.sidecars.insert(k.clone(), v.clone());
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, (shape, data))| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    dtype: "f32".to_string(),
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                e
            })
            .collect();
        Manifest {
            format: FORMAT_TAG.to_string(),
            version: 1,
            tensors,
            metadata: self.metadata.clone(),
            sidecars: self.sidecars.keys().cloned().collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest();
        let mut bytes = Vec::with_capacity(manifest.tensors.iter().map(|e| e.len * 4).sum());
        for (_, data) in self.tensors.values() {
            for x in data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_dir_atomic(dir, |tmp| {
            write_file(&tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
            write_file(&tmp.join(DATA_FILE), &bytes)?;
            for (name, value) in &self.sidecars {
                write_file(&tmp.join(name), serde_json::to_string_pretty(value)?.as_bytes())?;
            }
            Ok(())
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Format(format!("unexpected format tag {}", manifest.format)));
        }
        let data_path = dir.join(DATA_FILE);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut ckpt = Checkpoint::new();
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let start = e.offset * 4;
            let end = start + e.len * 4;
            if end > bytes.len() {
                return Err(Error::Format(format!("{}: data file truncated", e.name)));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.put_raw(e.name.clone(), e.shape.clone(), data)?;
        }
        ckpt.metadata = manifest.metadata;
        for name in manifest.sidecars {
            let p = dir.join(&name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            ckpt.sidecars.insert(name, serde_json::from_str(&text)?);
        }
        Ok(ckpt)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a file through a temp sibling and rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = sibling(path, "tmp");
    write_file(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Build a directory in a temp sibling, then swap it into place.
pub fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fill(&tmp)?;
    if dir.exists() {
        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}
