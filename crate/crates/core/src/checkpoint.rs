//! Checkpoints: a JSON manifest plus one little-endian `f32` blob holding the
//! parameters and then the optimizer moments, all in registry order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Rvos;
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub parameters: Vec<ParamEntry>,
    pub optimizer_step: u64,
    /// Total `f32` values in the blob: parameters, then first and second moments.
    pub total_floats: usize,
    pub blob: String,
}

/// Model weights with optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

/// SHA-256 over the little-endian bytes of every parameter, in registry order.
pub fn param_hash(params: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for t in params.tensors() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: &Rvos<f32>, adam: &Adam<f32>) -> Self {
        Self {
            config,
            params: model.params().clone(),
            adam: adam.clone(),
        }
    }

    pub fn model(&self) -> Result<Rvos<f32>> {
        Rvos::from_params(self.config.model.clone(), self.params.clone())
    }

    fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let parameters = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel();
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            parameters,
            optimizer_step: self.adam.step,
            total_floats: 3 * self.params.numel(),
            blob: BLOB_FILE.into(),
        }
    }

    /// Writes `dir/manifest.json` and `dir/params.bin`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let mut blob = Vec::with_capacity(4 * manifest.total_floats);
        let values = self
            .params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .chain(self.adam.m.iter().flatten())
            .chain(self.adam.v.iter().flatten());
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let blob_path = dir.join(&manifest.blob);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads from a manifest file or a directory containing one.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(FORMAT_VERSION)) {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version:?}, expected {FORMAT_VERSION}",
                manifest_path.display()
            )));
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&manifest.blob);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if bytes.len() != 4 * manifest.total_floats {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes, manifest declares {} floats",
                blob_path.display(),
                bytes.len(),
                manifest.total_floats
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let counts: Vec<usize> = manifest.parameters.iter().map(|p| p.shape.iter().product()).collect();
        let numel: usize = counts.iter().sum();
        if 3 * numel != manifest.total_floats {
            return Err(Error::Checkpoint("parameter shapes disagree with the blob size".into()));
        }
        let mut params = ParamStore::new(0);
        let mut m = Vec::with_capacity(counts.len());
        let mut v = Vec::with_capacity(counts.len());
        let mut at = 0;
        for (entry, &n) in manifest.parameters.iter().zip(&counts) {
            if entry.offset != 4 * at {
                return Err(Error::Checkpoint(format!(
                    "{}: unexpected offset {}",
                    entry.name, entry.offset
                )));
            }
            params.add(
                entry.name.clone(),
                Tensor::from_vec(&entry.shape, floats[at..at + n].to_vec())?,
            );
            m.push(floats[numel + at..numel + at + n].to_vec());
            v.push(floats[2 * numel + at..2 * numel + at + n].to_vec());
            at += n;
        }
        // Rebuilding the model validates names and shapes against the architecture.
        Rvos::from_params(manifest.config.model.clone(), params.clone())?;
        Ok(Self {
            adam: Adam {
                config: manifest.config.optimizer,
                step: manifest.optimizer_step,
                m,
                v,
            },
            config: manifest.config,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                slots: 2,
                blocks: 2,
                base_channels: 2,
                hidden_channels: vec![2, 2],
                input_size: [8, 8],
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let cfg = small();
        let model = Rvos::<f32>::new(cfg.model.clone(), 4).unwrap();
        let mut adam = Adam::new(cfg.optimizer, model.params());
        adam.step = 7;
        adam.m[0][0] = 0.25;
        adam.v[1][0] = 0.5;
        Checkpoint::new(cfg, &model, &adam)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let a = ck.save(&dir.path().join("a")).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back.params.names(), ck.params.names());
        assert_eq!(back.params.tensors(), ck.params.tensors());
        assert_eq!((&back.adam, &back.config), (&ck.adam, &ck.config));
        back.save(&dir.path().join("b")).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample().save(dir.path()).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_blob_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample().save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn hash_tracks_values() {
        let ck = sample();
        let h = param_hash(&ck.params);
        assert_eq!(h.len(), 64);
        let mut other = ck.params.clone();
        other.tensors_mut()[0].data_mut()[0] += 1.0;
        assert_ne!(param_hash(&other), h);
    }
}
