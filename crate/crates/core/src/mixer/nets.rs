use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{conv2d, linear, max_pool2x2, Conv2d, ConvSpec, Init, ParamBuilder};

/// Localization network of the spatial transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformNetConfig {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub hidden: usize,
}

impl Default for TransformNetConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 8,
            conv1_kernel: 7,
            conv2_channels: 10,
            conv2_kernel: 5,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskNetConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            channels: 32,
            kernel: 3,
        }
    }
}

pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// conv -> maxpool -> relu -> conv -> maxpool -> relu -> dense -> relu -> dense(k*6).
///
/// Convolutions use same-padding so the net accepts any input whose sides
/// are divisible by 4. The last layer starts at zero weight with an identity
/// bias, so every predicted transform is the identity at initialization.
#[derive(Debug, Clone)]
pub struct TransformNet {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    k: usize,
}

impl TransformNet {
    pub fn new(
        b: &ParamBuilder,
        cfg: &TransformNetConfig,
        in_channels: usize,
        k: usize,
        (height, width): (usize, usize),
    ) -> Result<Self> {
        let flat = cfg.conv2_channels * (height / 4) * (width / 4);
        let fc2 = b.pp("fc2");
        let identity: Vec<f64> = (0..k).flat_map(|_| IDENTITY_AFFINE).collect();
        let fc2 = Linear::new(
            fc2.weight("weight", (k * 6, cfg.hidden), Init::Const(0.0))?,
            Some(fc2.weight("bias", k * 6, Init::Values(identity))?),
        );
        Ok(Self {
            conv1: conv2d(
                &b.pp("conv1"),
                ConvSpec::same(in_channels, cfg.conv1_channels, cfg.conv1_kernel),
            )?,
            conv2: conv2d(
                &b.pp("conv2"),
                ConvSpec::same(cfg.conv1_channels, cfg.conv2_channels, cfg.conv2_kernel),
            )?,
            fc1: linear(&b.pp("fc1"), flat, cfg.hidden)?,
            fc2,
            k,
        })
    }

    /// `(B, 2k, H, W) -> (B, k, 2, 3)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let h = max_pool2x2(&self.conv1.forward(x)?)?.relu()?;
        let h = max_pool2x2(&self.conv2.forward(&h)?)?.relu()?;
        let h = self.fc1.forward(&h.flatten_from(1)?)?.relu()?;
        Ok(self.fc2.forward(&h)?.reshape((b, self.k, 2, 3))?)
    }
}

/// Spatial-preserving conv stack ending in a 1x1 conv to `k` logit channels.
#[derive(Debug, Clone)]
pub struct MaskNet {
    hidden: Vec<Conv2d>,
    out: Conv2d,
}

impl MaskNet {
    pub fn new(b: &ParamBuilder, cfg: &MaskNetConfig, in_channels: usize, k: usize) -> Result<Self> {
        let mut hidden = Vec::with_capacity(cfg.layers);
        let mut c = in_channels;
        for i in 0..cfg.layers {
            hidden.push(conv2d(
                &b.pp(format!("conv{i}")),
                ConvSpec::same(c, cfg.channels, cfg.kernel),
            )?);
            c = cfg.channels;
        }
        Ok(Self {
            hidden,
            out: conv2d(&b.pp("out"), ConvSpec::same(c, k, 1))?,
        })
    }

    /// `(B, 2k-1, H, W) -> (B, k, H, W)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.hidden {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(self.out.forward(&h)?)
    }
}
