//! Checkpoint container: a safetensors file whose header metadata carries
//! the format version, the model configuration, the vocabulary and the
//! training manifest, plus a plain-text `*.manifest.txt` sidecar.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::mmdit::{InitScheme, ToyMmDit};
use super::tokenizer::VOCAB;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub seed: u64,
    pub training_steps: usize,
    pub dataset_hash: String,
}

impl TrainManifest {
    pub fn to_text(&self) -> String {
        format!(
            "format_version={CHECKPOINT_FORMAT_VERSION}\nseed={}\ntraining_steps={}\ndataset_hash={}\n",
            self.seed, self.training_steps, self.dataset_hash
        )
    }
}

pub struct Checkpoint {
    pub path: PathBuf,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub manifest: TrainManifest,
    pub tensors: HashMap<String, Tensor>,
    /// SHA-256 of the container bytes.
    pub hash: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, vars: &VarMap, manifest: &TrainManifest) -> Result<String> {
    let data = vars.data().lock().expect("var map lock");
    let mut tensors: Vec<(String, Tensor)> = data
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    drop(data);
    tensors.sort_by(|a, b| a.0.cmp(&b.0));

    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("vocab".to_string(), serde_json::to_string(&VOCAB[..])?);
    meta.insert("manifest".to_string(), serde_json::to_string(manifest)?);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    safetensors::tensor::serialize_to_file(tensors, Some(meta), path)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    std::fs::write(manifest_path(path), manifest.to_text())?;
    Ok(crate::util::sha256_hex(&std::fs::read(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta = meta
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing header metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("missing '{k}' metadata")));
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| ckpt_err(path, "bad format_version"))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(field("config")?)?;
    let vocab: Vec<String> = serde_json::from_str(field("vocab")?)?;
    if vocab.iter().map(String::as_str).ne(VOCAB.iter().copied()) {
        return Err(ckpt_err(path, "vocabulary differs from the built-in tokenizer"));
    }
    let manifest: TrainManifest = serde_json::from_str(field("manifest")?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint {
        path: path.to_path_buf(),
        config,
        vocab,
        manifest,
        tensors,
        hash: crate::util::sha256_hex(&bytes),
    })
}

impl Checkpoint {
    /// Frozen model for inference at the given precision.
    pub fn model(&self, dtype: DType) -> Result<ToyMmDit> {
        let vb = VarBuilder::from_tensors(self.tensors.clone(), dtype, &Device::Cpu);
        ToyMmDit::new(self.config.clone(), vb, InitScheme::Random)
    }

    /// Trainable copy of the parameters.
    pub fn var_map(&self, dtype: DType) -> Result<VarMap> {
        let vars = VarMap::new();
        {
            let vb = VarBuilder::from_varmap(&vars, dtype, &Device::Cpu);
            ToyMmDit::new(self.config.clone(), vb, InitScheme::Random)?;
        }
        let data = vars.data().lock().expect("var map lock");
        for (name, var) in data.iter() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| ckpt_err(&self.path, format!("missing tensor {name}")))?;
            var.set(&t.to_dtype(dtype)?)?;
        }
        drop(data);
        Ok(vars)
    }
}

pub fn parameter_count(vars: &VarMap) -> usize {
    vars.all_vars().iter().map(|v| v.elem_count()).sum()
}
