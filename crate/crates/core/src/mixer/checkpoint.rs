use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::{MixStrategy, MixerConfig, MixerParams};
use crate::error::{Error, Result};
use crate::models::checkpoint::{checkpoint_paths, dtype_name, parse_dtype, read_json, read_tensors, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounts {
    pub transform: usize,
    pub mask: usize,
}

/// JSON written next to the mixer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerSidecar {
    pub k: usize,
    pub alpha: f64,
    pub strategy: MixStrategy,
    pub channels: ChannelCounts,
    pub tau: f64,
    pub config: MixerConfig,
    pub dataset: String,
    pub teacher: String,
    #[serde(default)]
    pub weights_digest: String,
    #[serde(default)]
    pub dtype: String,
}

impl MixerSidecar {
    pub fn describe(
        params: &MixerParams,
        alpha: f64,
        strategy: MixStrategy,
        dataset: impl Into<String>,
        teacher: impl Into<String>,
    ) -> Result<Self> {
        let config = params.config().clone();
        Ok(Self {
            k: config.k,
            alpha,
            strategy,
            channels: ChannelCounts {
                transform: config.transform_in_channels(),
                mask: config.mask_in_channels(),
            },
            tau: params.tau()?,
            config,
            dataset: dataset.into(),
            teacher: teacher.into(),
            weights_digest: params.store().digest()?,
            dtype: dtype_name(params.dtype()).into(),
        })
    }
}

/// Writes `<stem>.safetensors` and `<stem>.json`; digest, tau and dtype in
/// the sidecar are refreshed from `params`.
pub fn save_mixer(params: &MixerParams, mut sidecar: MixerSidecar, stem: &Path) -> Result<MixerSidecar> {
    if sidecar.config != *params.config() || sidecar.k != params.k() {
        return Err(Error::Config("sidecar does not describe these mixer parameters".into()));
    }
    sidecar.weights_digest = params.store().digest()?;
    sidecar.tau = params.tau()?;
    sidecar.dtype = dtype_name(params.dtype()).into();
    let (weights, json_path) = checkpoint_paths(stem);
    write_atomic(&weights, |tmp| params.store().save(tmp))?;
    let json = serde_json::to_string_pretty(&sidecar)?;
    write_atomic(&json_path, |tmp| {
        std::fs::write(tmp, &json).map_err(|e| Error::io(tmp, e))
    })?;
    Ok(sidecar)
}

pub fn load_mixer(path: &Path, frozen: bool) -> Result<(MixerParams, MixerSidecar)> {
    let (weights, json_path) = checkpoint_paths(path);
    let sidecar: MixerSidecar = read_json(&json_path)?;
    let corrupt = |message: String| Error::Corrupt {
        path: json_path.clone(),
        message,
    };
    if sidecar.k != sidecar.config.k {
        return Err(corrupt(format!(
            "k={} but config has k={}",
            sidecar.k, sidecar.config.k
        )));
    }
    let expected = ChannelCounts {
        transform: sidecar.config.transform_in_channels(),
        mask: sidecar.config.mask_in_channels(),
    };
    if sidecar.channels != expected {
        return Err(corrupt(format!(
            "channel counts {:?} do not match k={}",
            sidecar.channels, sidecar.k
        )));
    }
    let dtype = parse_dtype(if sidecar.dtype.is_empty() {
        "f32"
    } else {
        &sidecar.dtype
    })?;
    let device = Device::Cpu;
    let tensors = read_tensors(&weights, &device)?;
    let params =
        MixerParams::from_tensors(sidecar.config.clone(), tensors, frozen, dtype, &device).map_err(|e| match e {
            Error::ParamMismatch(message) => Error::Checkpoint {
                path: weights.clone(),
                message,
            },
            other => other,
        })?;
    Ok((params, sidecar))
}
