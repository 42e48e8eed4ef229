use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::{gap_head, CamFeatures, Classifier};
use crate::error::Result;
use crate::nn::{conv2d, linear, max_pool2x2, Conv2d, ConvSpec, ParamBuilder};

/// conv3x3(8) -> relu -> maxpool2 -> conv3x3(16) -> relu -> GAP -> linear.
#[derive(Debug, Clone)]
pub struct ToyCnn {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

impl ToyCnn {
    pub const FEATURES: usize = 16;

    pub fn new(b: &ParamBuilder, channels: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            conv1: conv2d(&b.pp("conv1"), ConvSpec::same(channels, 8, 3))?,
            conv2: conv2d(&b.pp("conv2"), ConvSpec::same(8, Self::FEATURES, 3))?,
            head: linear(&b.pp("head"), Self::FEATURES, classes)?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let h = max_pool2x2(&self.conv1.forward(x)?.relu()?)?;
        Ok(self.conv2.forward(&h)?.relu()?)
    }
}

impl Classifier for ToyCnn {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        gap_head(&self.features(x)?, &self.head)
    }

    fn cam_features(&self, x: &Tensor) -> Result<CamFeatures> {
        Ok(CamFeatures {
            features: self.features(x)?,
            head_weight: self.head.weight().clone(),
        })
    }
}
