//! CIFAR-style residual networks (3x3 stem, no initial max-pool).

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::{gap_head, CamFeatures, Classifier};
use crate::error::Result;
use crate::nn::{conv2d, linear, BatchNorm2d, Conv2d, ConvSpec, ParamBuilder};

fn conv3x3(b: &ParamBuilder, i: usize, o: usize, stride: usize) -> Result<Conv2d> {
    conv2d(b, ConvSpec::same(i, o, 3).stride(stride).no_bias())
}

fn conv1x1(b: &ParamBuilder, i: usize, o: usize, stride: usize) -> Result<Conv2d> {
    conv2d(b, ConvSpec::same(i, o, 1).stride(stride).no_bias())
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(b: &ParamBuilder, i: usize, o: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || i != o {
            Some((
                conv1x1(&b.pp("shortcut.conv"), i, o, stride)?,
                BatchNorm2d::new(&b.pp("shortcut.bn"), o)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv3x3(&b.pp("conv1"), i, o, stride)?,
            bn1: BatchNorm2d::new(&b.pp("bn1"), o)?,
            conv2: conv3x3(&b.pp("conv2"), o, o, 1)?,
            bn2: BatchNorm2d::new(&b.pp("bn2"), o)?,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let out = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let out = self.bn2.forward_t(&self.conv2.forward(&out)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((out + skip)?.relu()?)
    }
}

/// Pre-activation block; also the wide-resnet block (without dropout).
#[derive(Debug, Clone)]
struct PreActBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl PreActBlock {
    fn new(b: &ParamBuilder, i: usize, o: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || i != o {
            Some(conv1x1(&b.pp("shortcut"), i, o, stride)?)
        } else {
            None
        };
        Ok(Self {
            bn1: BatchNorm2d::new(&b.pp("bn1"), i)?,
            conv1: conv3x3(&b.pp("conv1"), i, o, stride)?,
            bn2: BatchNorm2d::new(&b.pp("bn2"), o)?,
            conv2: conv3x3(&b.pp("conv2"), o, o, 1)?,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let pre = self.bn1.forward_t(x, train)?.relu()?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(&pre)?,
            None => x.clone(),
        };
        let out = self.conv1.forward(&pre)?;
        let out = self.conv2.forward(&self.bn2.forward_t(&out, train)?.relu()?)?;
        Ok((out + skip)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

impl ResNet {
    pub fn resnet18(b: &ParamBuilder, channels: usize, classes: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut inp = 64;
        for (stage, (width, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
            for i in 0..2 {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(BasicBlock::new(
                    &b.pp(format!("layer{}.{i}", stage + 1)),
                    inp,
                    width,
                    s,
                )?);
                inp = width;
            }
        }
        Ok(Self {
            stem: conv3x3(&b.pp("stem"), channels, 64, 1)?,
            stem_bn: BatchNorm2d::new(&b.pp("stem_bn"), 64)?,
            blocks,
            head: linear(&b.pp("head"), 512, classes)?,
        })
    }

    fn features_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem_bn.forward_t(&self.stem.forward(x)?, train)?.relu()?;
        for block in &self.blocks {
            h = block.forward_t(&h, train)?;
        }
        Ok(h)
    }
}

impl Classifier for ResNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        gap_head(&self.features_t(x, train)?, &self.head)
    }

    fn cam_features(&self, x: &Tensor) -> Result<CamFeatures> {
        Ok(CamFeatures {
            features: self.features_t(x, false)?,
            head_weight: self.head.weight().clone(),
        })
    }
}

/// Shared body of pre-activation ResNet-18 and WRN: stem conv, pre-act
/// blocks, final BN + ReLU feeding the pooled head.
#[derive(Debug, Clone)]
struct PreActBody {
    stem: Conv2d,
    blocks: Vec<PreActBlock>,
    final_bn: BatchNorm2d,
    head: Linear,
}

impl PreActBody {
    fn new(
        b: &ParamBuilder,
        channels: usize,
        classes: usize,
        stem_width: usize,
        stages: &[(usize, usize)],
        blocks_per_stage: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut inp = stem_width;
        for (stage, &(width, stride)) in stages.iter().enumerate() {
            for i in 0..blocks_per_stage {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(PreActBlock::new(
                    &b.pp(format!("layer{}.{i}", stage + 1)),
                    inp,
                    width,
                    s,
                )?);
                inp = width;
            }
        }
        Ok(Self {
            stem: conv3x3(&b.pp("stem"), channels, stem_width, 1)?,
            blocks,
            final_bn: BatchNorm2d::new(&b.pp("final_bn"), inp)?,
            head: linear(&b.pp("head"), inp, classes)?,
        })
    }

    fn features_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for block in &self.blocks {
            h = block.forward_t(&h, train)?;
        }
        Ok(self.final_bn.forward_t(&h, train)?.relu()?)
    }

    fn cam(&self, x: &Tensor) -> Result<CamFeatures> {
        Ok(CamFeatures {
            features: self.features_t(x, false)?,
            head_weight: self.head.weight().clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreActResNet(PreActBody);

impl PreActResNet {
    pub fn preact18(b: &ParamBuilder, channels: usize, classes: usize) -> Result<Self> {
        let stages = [(64, 1), (128, 2), (256, 2), (512, 2)];
        Ok(Self(PreActBody::new(b, channels, classes, 64, &stages, 2)?))
    }
}

impl Classifier for PreActResNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        gap_head(&self.0.features_t(x, train)?, &self.0.head)
    }

    fn cam_features(&self, x: &Tensor) -> Result<CamFeatures> {
        self.0.cam(x)
    }
}

#[derive(Debug, Clone)]
pub struct WideResNet(PreActBody);

impl WideResNet {
    pub fn new(b: &ParamBuilder, depth: usize, widen: usize, channels: usize, classes: usize) -> Result<Self> {
        let n = (depth - 4) / 6;
        let stages = [(16 * widen, 1), (32 * widen, 2), (64 * widen, 2)];
        Ok(Self(PreActBody::new(b, channels, classes, 16, &stages, n)?))
    }
}

impl Classifier for WideResNet {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        gap_head(&self.0.features_t(x, train)?, &self.0.head)
    }

    fn cam_features(&self, x: &Tensor) -> Result<CamFeatures> {
        self.0.cam(x)
    }
}
