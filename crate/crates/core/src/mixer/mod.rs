//! The learnable mixing module: transform prediction, differentiable
//! warping, temperature-softmax mask prediction and the mixing rule.

mod checkpoint;
mod mixing;
mod nets;
mod sampling;
mod warp;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, ParamBuilder, ParamStore};
use crate::rng::Rng;

pub use checkpoint::{load_mixer, save_mixer, ChannelCounts, MixerSidecar};
pub use mixing::{
    combine, masks_from_logits, mix, mix_batch, mix_labels, mix_with, MixDetails, MixInputs, MixOutcome, MixSettings,
    MixedBatch, MASK_SUM_TOLERANCE,
};
pub use nets::{MaskNet, MaskNetConfig, TransformNet, TransformNetConfig, IDENTITY_AFFINE};
pub use sampling::{sample_coefficients, sample_noise, MixCoefficients, NoiseField, DEFAULT_NOISE_GRID};
pub use warp::{apply_affine, identity_theta, pixel_to_normalized, WarpPadding};

/// Which parts of the module produce transforms and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixStrategy {
    /// Predicted transforms and predicted masks.
    #[default]
    Full,
    /// Predicted transforms; masks are a temperature softmax over warped CAMs.
    StnOnly,
    /// Identity transforms; predicted masks.
    MpnOnly,
    /// Identity transforms; masks are a temperature softmax over raw CAMs.
    SoftmaxCam,
}

impl MixStrategy {
    pub fn predicts_transforms(&self) -> bool {
        matches!(self, MixStrategy::Full | MixStrategy::StnOnly)
    }

    pub fn predicts_masks(&self) -> bool {
        matches!(self, MixStrategy::Full | MixStrategy::MpnOnly)
    }
}

impl fmt::Display for MixStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixStrategy::Full => "full",
            MixStrategy::StnOnly => "stn-only",
            MixStrategy::MpnOnly => "mpn-only",
            MixStrategy::SoftmaxCam => "softmax-cam",
        })
    }
}

impl FromStr for MixStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MixStrategy::Full),
            "stn-only" => Ok(MixStrategy::StnOnly),
            "mpn-only" => Ok(MixStrategy::MpnOnly),
            "softmax-cam" => Ok(MixStrategy::SoftmaxCam),
            _ => Err(Error::Config(format!("unknown mix strategy `{s}`"))),
        }
    }
}

fn default_noise_grid() -> (usize, usize) {
    DEFAULT_NOISE_GRID
}

fn default_init_tau() -> f64 {
    1.0
}

fn default_min_tau() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Number of images blended into each mixed sample.
    pub k: usize,
    /// Native resolution of the transform network.
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub transform: TransformNetConfig,
    #[serde(default)]
    pub mask: MaskNetConfig,
    #[serde(default = "default_noise_grid")]
    pub noise_grid: (usize, usize),
    #[serde(default = "default_init_tau")]
    pub init_tau: f64,
    #[serde(default = "default_min_tau")]
    pub min_tau: f64,
    #[serde(default)]
    pub padding: WarpPadding,
}

impl MixerConfig {
    pub fn new(k: usize, height: usize, width: usize) -> Self {
        Self {
            k,
            height,
            width,
            transform: TransformNetConfig::default(),
            mask: MaskNetConfig::default(),
            noise_grid: DEFAULT_NOISE_GRID,
            init_tau: 1.0,
            min_tau: 1e-3,
            padding: WarpPadding::Zeros,
        }
    }

    /// CAMs, k-1 coefficient planes and one noise plane.
    pub fn transform_in_channels(&self) -> usize {
        2 * self.k
    }

    /// Warped CAMs and k-1 coefficient planes.
    pub fn mask_in_channels(&self) -> usize {
        2 * self.k - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.height < 4 || self.width < 4 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "mixer resolution {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        let kernels = [
            self.transform.conv1_kernel,
            self.transform.conv2_kernel,
            self.mask.kernel,
        ];
        if kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("mixer kernels must be odd".into()));
        }
        if self.mask.layers == 0 || self.mask.channels == 0 {
            return Err(Error::Config("mask network needs at least one hidden layer".into()));
        }
        if !(self.init_tau > 0.0 && self.min_tau > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.noise_grid.0 == 0 || self.noise_grid.1 == 0 {
            return Err(Error::Config("noise grid must be non-empty".into()));
        }
        Ok(())
    }
}

/// Weights of the transform net, the mask net and the log-temperature.
pub struct MixerParams {
    config: MixerConfig,
    store: ParamStore,
    transform: TransformNet,
    mask: MaskNet,
    log_tau: Tensor,
}

impl fmt::Debug for MixerParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MixerParams")
            .field("config", &self.config)
            .field("params", &self.store.weight_count())
            .finish()
    }
}

impl MixerParams {
    pub fn init(config: MixerConfig, rng: Rng, dtype: DType, device: &Device) -> Result<Self> {
        Self::assemble(config, ParamBuilder::init(rng, dtype, device))
    }

    pub fn from_tensors(
        config: MixerConfig,
        tensors: HashMap<String, Tensor>,
        frozen: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = if frozen {
            ParamBuilder::frozen(tensors, dtype, device)
        } else {
            ParamBuilder::load(tensors, dtype, device)
        };
        Self::assemble(config, b)
    }

    fn assemble(config: MixerConfig, b: ParamBuilder) -> Result<Self> {
        config.validate()?;
        let transform = TransformNet::new(
            &b.pp("transform"),
            &config.transform,
            config.transform_in_channels(),
            config.k,
            (config.height, config.width),
        )?;
        let mask = MaskNet::new(&b.pp("mask"), &config.mask, config.mask_in_channels(), config.k)?;
        let log_tau = b.weight("log_tau", 1, Init::Const(config.init_tau.ln()))?;
        let store = b.finish()?;
        Ok(Self {
            config,
            store,
            transform,
            mask,
            log_tau,
        })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn transform_net(&self) -> &TransformNet {
        &self.transform
    }

    pub fn mask_net(&self) -> &MaskNet {
        &self.mask
    }

    /// Read-only snapshot, cheap to hand to data-loading workers.
    pub fn freeze(&self) -> Result<Self> {
        Self::from_tensors(
            self.config.clone(),
            self.store.snapshot()?,
            true,
            self.store.dtype(),
            self.store.device(),
        )
    }

    /// Temperature as a `(1,)` tensor, `max(exp(log_tau), min_tau)`.
    pub fn tau_tensor(&self) -> Result<Tensor> {
        Ok(self.log_tau.exp()?.maximum(self.config.min_tau)?)
    }

    pub fn tau(&self) -> Result<f64> {
        Ok(self.tau_tensor()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Parameters owned by the transform net (`transform.*`).
    pub fn transform_vars(&self) -> Vec<(&str, &candle_core::Var)> {
        self.store
            .trainable()
            .into_iter()
            .filter(|(n, _)| n.starts_with("transform."))
            .collect()
    }

    /// Parameters owned by the mask net (`mask.*`).
    pub fn mask_vars(&self) -> Vec<(&str, &candle_core::Var)> {
        self.store
            .trainable()
            .into_iter()
            .filter(|(n, _)| n.starts_with("mask."))
            .collect()
    }
}
