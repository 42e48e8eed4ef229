use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub dataset: String,
    pub seed: u64,
    pub epoch: usize,
    pub metrics_digest: String,
    /// Filled in by [`save_checkpoint`].
    #[serde(default)]
    pub weights_digest: String,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f32".into()
}

pub(crate) fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub(crate) fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("unsupported dtype `{other}`"))),
    }
}

/// `(weights, sidecar)` for a checkpoint stem; accepts the stem itself or
/// either of the two files.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("safetensors") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (append_ext(&stem, "safetensors"), append_ext(&stem, "json"))
}

fn append_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.safetensors` and `<stem>.json`. Each file is written to a
/// temporary name and renamed into place.
pub fn save_checkpoint(model: &Model, mut meta: CheckpointMeta, stem: &Path) -> Result<CheckpointMeta> {
    if meta.arch != *model.spec() {
        return Err(Error::Config(format!(
            "metadata arch {:?} does not describe model {:?}",
            meta.arch,
            model.spec()
        )));
    }
    meta.weights_digest = model.store().digest()?;
    meta.dtype = dtype_name(model.store().dtype()).into();
    let (weights, sidecar) = checkpoint_paths(stem);
    write_atomic(&weights, |tmp| model.store().save(tmp))?;
    let json = serde_json::to_string_pretty(&meta)?;
    write_atomic(&sidecar, |tmp| {
        std::fs::write(tmp, &json).map_err(|e| Error::io(tmp, e))
    })?;
    Ok(meta)
}

pub(crate) fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = append_ext(path, "tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_tensors(
    path: &Path,
    device: &Device,
) -> Result<std::collections::HashMap<String, candle_core::Tensor>> {
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "file not found".into(),
        });
    }
    candle_core::safetensors::load(path, device).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint {
            path: path.to_path_buf(),
            message: "sidecar not found".into(),
        },
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads and validates a checkpoint. Nothing is returned unless every
/// tensor matches the architecture named in the sidecar.
pub fn load_checkpoint(path: &Path, frozen: bool) -> Result<(Model, CheckpointMeta)> {
    let (weights, sidecar) = checkpoint_paths(path);
    let meta: CheckpointMeta = read_json(&sidecar)?;
    let dtype = parse_dtype(&meta.dtype)?;
    let device = Device::Cpu;
    let tensors = read_tensors(&weights, &device)?;
    let model = Model::from_tensors(meta.arch, tensors, frozen, dtype, &device).map_err(|e| match e {
        Error::ParamMismatch(message) => Error::Checkpoint {
            path: weights.clone(),
            message,
        },
        other => other,
    })?;
    Ok((model, meta))
}
