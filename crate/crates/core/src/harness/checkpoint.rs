//! Checkpoint directories: `manifest.json` plus raw little-endian f32 buffers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ClassEntry, LabelRegistry};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::model::{ModelSpec, SegModel};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUFFER_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub config: serde_json::Value,
    pub registry: Vec<ClassEntry>,
    pub step: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: SegModel<T>,
    pub registry: LabelRegistry,
    pub config: serde_json::Value,
    pub step: u64,
    pub epoch: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: SegModel<T>, registry: LabelRegistry, config: serde_json::Value, step: u64, epoch: usize) -> Self {
        Self {
            model,
            registry,
            config,
            step,
            epoch,
        }
    }

    /// Writes the checkpoint into directory `dir`, creating it if needed.
    /// Parameters are stored as f32.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut buf = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.model.params.iter() {
            let offset = buf.len();
            for v in t.data() {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                byte_len: buf.len() - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.spec.clone(),
            config: self.config.clone(),
            registry: self.registry.entries(),
            step: self.step,
            epoch: self.epoch,
            tensors,
        };
        let bin = dir.join(BUFFER_FILE);
        fs::write(&bin, &buf).map_err(|e| Error::io(&bin, e))?;
        super::train::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bin = dir.join(BUFFER_FILE);
        let buf = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut params = ParamStore::new();
        let mut expected_end = 0;
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.dtype != "f32" || e.byte_len != numel * 4 || e.offset != expected_end {
                return Err(Error::Checkpoint(format!("manifest entry {} is inconsistent", e.name)));
            }
            let bytes = buf
                .get(e.offset..e.offset + e.byte_len)
                .ok_or_else(|| Error::Checkpoint(format!("buffer too short for {}", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            params.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
            expected_end += e.byte_len;
        }
        if expected_end != buf.len() {
            return Err(Error::Checkpoint(format!(
                "buffer has {} bytes, manifest describes {expected_end}",
                buf.len()
            )));
        }
        let model = SegModel::from_params(manifest.model, params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            model,
            registry: LabelRegistry::from_entries(&manifest.registry)?,
            config: manifest.config,
            step: manifest.step,
            epoch: manifest.epoch,
        })
    }
}

/// Fails unless both checkpoints share the registry `expected`.
pub fn check_registries<T>(expected: &LabelRegistry, checkpoints: &[&Checkpoint<T>]) -> Result<()> {
    for c in checkpoints {
        if &c.registry != expected {
            return Err(Error::Config(format!(
                "checkpoint for the {} head was trained with a different class registry",
                c.model.spec.head
            )));
        }
    }
    Ok(())
}
