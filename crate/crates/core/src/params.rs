//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a JSON manifest plus a sidecar blob holding every tensor's
//! values as little-endian `f64`, concatenated in manifest order. The blob
//! sits next to the manifest with the extension replaced by `.bin`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "neurovis-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies values of every parameter in `other` whose name (after
    /// stripping `from_prefix` and prepending `to_prefix`) exists here.
    /// Returns how many tensors were copied.
    pub fn copy_from(&mut self, other: &ParamStore, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for id in other.ids() {
            let Some(rest) = other.name(id).strip_prefix(from_prefix) else {
                continue;
            };
            let target = format!("{to_prefix}{rest}");
            if let Some(dst) = self.id(&target) {
                let src = other.get(id);
                if src.shape() != self.get(dst).shape() {
                    return Err(Error::Shape {
                        op: "copy_from",
                        lhs: self.get(dst).shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                self.get_mut(dst).data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// A new store holding copies of the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for id in self.ids_with_prefix(prefix) {
            let t = self.get(id);
            out.add(self.name(id), Tensor::new(t.shape().to_vec(), t.data().to_vec())?)?;
        }
        Ok(out)
    }

    pub fn save(&self, manifest_path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let blob_path = blob_path(manifest_path);
        let mut blob = Vec::with_capacity(self.numel() * 8);
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                byte_offset: offset,
                byte_length: (t.numel() * 8) as u64,
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            code_version: meta.code_version.clone(),
            config: meta.config.clone(),
            extra: meta.extra.clone(),
            blob: blob_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tensors: entries,
        };
        if let Some(dir) = manifest_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(&blob_path, &blob)?;
        fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
        let text = fs::read_to_string(manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                manifest_path,
                format!(
                    "unsupported checkpoint {} v{}",
                    manifest.format, manifest.version
                ),
            ));
        }
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path)?;
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            let (start, len) = (e.byte_offset as usize, e.byte_length as usize);
            if e.dtype != "f64" || len != numel * 8 || start + len > blob.len() {
                return Err(Error::format(
                    &blob_path,
                    format!("tensor {} does not fit the blob", e.name),
                ));
            }
            let data = blob[start..start + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(&e.name, Tensor::new(e.shape.clone(), data)?)?;
        }
        let meta = CheckpointMeta {
            code_version: manifest.code_version,
            config: manifest.config,
            extra: manifest.extra,
        };
        Ok((store, meta))
    }
}

/// Provenance stored in every checkpoint manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub code_version: String,
    /// Canonical resolved configuration of the run that produced the file.
    pub config: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            code_version: crate::CODE_VERSION.to_string(),
            config: config.into(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    code_version: String,
    config: String,
    #[serde(default)]
    extra: BTreeMap<String, String>,
    blob: String,
    tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}
