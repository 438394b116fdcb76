//! Single-file checkpoints: safetensors archives with one JSON metadata
//! entry. Writes go to a temporary sibling and are renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::vq::Codebook;
use crate::xmvae::{tensor_to_f64, Xmvae};

pub const META_KEY: &str = "xmvae.meta";
pub const KIND_XMVAE: &str = "xmvae";
pub const KIND_PRIOR: &str = "prior";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: String,
    /// Last completed epoch.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub adam_t: u64,
    /// Quantization fingerprint of the data the model was trained on.
    pub fingerprint: String,
    pub dtype: String,
    pub config: serde_json::Value,
    /// Hash of the checkpoint this one was derived from.
    pub parent: Option<String>,
    pub best_validation: Option<f64>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        DType::F32 => "f32",
        DType::BF16 => "bf16",
        DType::F16 => "f16",
        _ => "other",
    }
}

pub fn parse_dtype(name: &str) -> Option<DType> {
    match name {
        "f64" => Some(DType::F64),
        "f32" => Some(DType::F32),
        "bf16" => Some(DType::BF16),
        "f16" => Some(DType::F16),
        _ => None,
    }
}

pub fn write_archive(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &Meta) -> Result<()> {
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.set_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_archive(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, Meta)> {
    let bytes = fs::read(path).map_err(|e| bad(path, e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(path, e.to_string()))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad(path, "metadata entry missing"))?;
    let meta: Meta = serde_json::from_str(text).map_err(|e| bad(path, e.to_string()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((tensors, meta))
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Rejects a checkpoint made for a different quantization.
pub fn check_fingerprint(path: &Path, meta: &Meta, expected: Option<&str>) -> Result<()> {
    match expected {
        Some(f) if f != meta.fingerprint => Err(bad(
            path,
            format!(
                "quantization fingerprint {} does not match the data ({f})",
                meta.fingerprint
            ),
        )),
        _ => Ok(()),
    }
}

/// Parameter, optimizer and codebook tensors of a model.
pub fn model_tensors(model: &Xmvae, adam: Option<&Adam>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, var) in model.store.vars() {
        out.insert(format!("param/{name}"), var.as_tensor().clone());
    }
    if let Some(adam) = adam {
        for (i, name) in adam.names.iter().enumerate() {
            out.insert(format!("adam_m/{name}"), adam.m[i].clone());
            out.insert(format!("adam_v/{name}"), adam.v[i].clone());
        }
    }
    let cb = &model.codebook;
    let dev = model.device();
    out.insert(
        "codebook/vectors".into(),
        Tensor::from_vec(cb.vectors.clone(), (cb.k, cb.dim), dev)?,
    );
    out.insert(
        "codebook/ema_count".into(),
        Tensor::from_vec(cb.ema_count.clone(), cb.k, dev)?,
    );
    out.insert(
        "codebook/ema_sum".into(),
        Tensor::from_vec(cb.ema_sum.clone(), (cb.k, cb.dim), dev)?,
    );
    Ok(out)
}

pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub best_validation: Option<f64>,
    pub parent: Option<String>,
}

pub fn save_xmvae(path: &Path, model: &Xmvae, adam: Option<&Adam>, progress: &Progress, fingerprint: &str) -> Result<()> {
    let meta = Meta {
        kind: KIND_XMVAE.into(),
        epoch: progress.epoch,
        step: progress.step,
        adam_t: adam.map_or(0, |a| a.t),
        fingerprint: fingerprint.into(),
        dtype: dtype_name(model.dtype()).into(),
        config: serde_json::to_value(&model.config)?,
        parent: progress.parent.clone(),
        best_validation: progress.best_validation,
    };
    write_archive(path, &model_tensors(model, adam)?, &meta)
}

pub struct Loaded<T> {
    pub value: T,
    pub meta: Meta,
    pub tensors: HashMap<String, Tensor>,
}

impl<T> Loaded<T> {
    /// Restores optimizer moments saved next to the parameters.
    pub fn restore_adam(&self, adam: &mut Adam) -> Result<()> {
        adam.load_state(self.meta.adam_t, |name| {
            Some((
                self.tensors.get(&format!("adam_m/{name}"))?.clone(),
                self.tensors.get(&format!("adam_v/{name}"))?.clone(),
            ))
        })
    }
}

/// Copies every `param/` tensor of an archive into a store, requiring an
/// exact match of names and shapes.
pub fn restore_params(
    path: &Path,
    store: &crate::params::ParamStore,
    tensors: &HashMap<String, Tensor>,
) -> Result<()> {
    let saved: Vec<&String> = tensors.keys().filter(|k| k.starts_with("param/")).collect();
    if saved.len() != store.vars().len() {
        return Err(bad(
            path,
            format!("{} parameters saved, model has {}", saved.len(), store.vars().len()),
        ));
    }
    for name in store.vars().keys() {
        let t = tensors
            .get(&format!("param/{name}"))
            .ok_or_else(|| bad(path, format!("parameter {name} missing")))?;
        store.set(name, t).map_err(|e| bad(path, e.to_string()))?;
    }
    Ok(())
}

pub fn load_xmvae(path: &Path, expected_fingerprint: Option<&str>, device: &Device) -> Result<Loaded<Xmvae>> {
    let (tensors, meta) = read_archive(path, device)?;
    if meta.kind != KIND_XMVAE {
        return Err(bad(path, format!("expected an {KIND_XMVAE} checkpoint, found {}", meta.kind)));
    }
    check_fingerprint(path, &meta, expected_fingerprint)?;
    let config: ModelConfig = serde_json::from_value(meta.config.clone())?;
    let dtype = parse_dtype(&meta.dtype).ok_or_else(|| bad(path, format!("unknown dtype {}", meta.dtype)))?;
    let mut model = Xmvae::new(config, 0, dtype, device)?;
    restore_params(path, &model.store, &tensors)?;
    let get = |name: &str| -> Result<Vec<f64>> {
        tensor_to_f64(tensors.get(name).ok_or_else(|| bad(path, format!("{name} missing")))?)
    };
    model.codebook = Codebook::from_state(
        get("codebook/vectors")?,
        get("codebook/ema_count")?,
        get("codebook/ema_sum")?,
        model.config.ema_decay,
        model.config.ema_epsilon,
        dtype,
        device,
    )?;
    if model.codebook.k != model.config.codebook_size || model.codebook.dim != model.config.d_z {
        return Err(bad(path, "codebook shape does not match the configuration"));
    }
    Ok(Loaded {
        value: model,
        meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = Xmvae::new(ModelConfig::tiny(), 3, DType::F32, &Device::Cpu).unwrap();
        let adam = Adam::new(model.store.vars_with_prefix(""), &TrainConfig::default()).unwrap();
        let progress = Progress {
            epoch: 4,
            step: 17,
            best_validation: Some(1.5),
            parent: None,
        };
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        save_xmvae(&a, &model, Some(&adam), &progress, "fp").unwrap();
        let loaded = load_xmvae(&a, Some("fp"), &Device::Cpu).unwrap();
        let mut adam2 = Adam::new(loaded.value.store.vars_with_prefix(""), &TrainConfig::default()).unwrap();
        loaded.restore_adam(&mut adam2).unwrap();
        save_xmvae(&b, &loaded.value, Some(&adam2), &progress, "fp").unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(loaded.meta.epoch, 4);
        assert!(!dir.path().join("a.tmp").exists());
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Xmvae::new(ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let p = dir.path().join("m.safetensors");
        let progress = Progress {
            epoch: 0,
            step: 0,
            best_validation: None,
            parent: None,
        };
        save_xmvae(&p, &model, None, &progress, "one").unwrap();
        assert!(matches!(
            load_xmvae(&p, Some("two"), &Device::Cpu),
            Err(Error::Checkpoint { .. })
        ));
        assert!(load_xmvae(&p, None, &Device::Cpu).is_ok());
    }
}
