//! Architecture registry: every family ends in final-conv features, global
//! average pooling and a linear head, which is what CAM extraction needs.

pub(crate) mod checkpoint;
mod resnet;
mod toy;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamStore};
use crate::rng::Rng;

pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use resnet::{PreActResNet, ResNet, WideResNet};
pub use toy::ToyCnn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Two conv layers, used for oracle and gradient tests.
    ToyCnn,
    ResNet18,
    PreActResNet18,
    WideResNet {
        depth: usize,
        widen: usize,
    },
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::ToyCnn => write!(f, "toy-cnn"),
            Family::ResNet18 => write!(f, "resnet-18"),
            Family::PreActResNet18 => write!(f, "preact-resnet-18"),
            Family::WideResNet { depth, widen } => write!(f, "wide-resnet-{depth}-{widen}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-cnn" => Ok(Family::ToyCnn),
            "resnet-18" => Ok(Family::ResNet18),
            "preact-resnet-18" => Ok(Family::PreActResNet18),
            _ => {
                let wrn = s.strip_prefix("wide-resnet-").and_then(|rest| {
                    let (d, w) = rest.split_once('-')?;
                    Some((d.parse().ok()?, w.parse().ok()?))
                });
                match wrn {
                    Some((depth, widen)) if depth >= 10 && (depth - 4) % 6 == 0 && widen > 0 => {
                        Ok(Family::WideResNet { depth, widen })
                    }
                    _ => Err(Error::Config(format!("unknown architecture family `{s}`"))),
                }
            }
        }
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(family: Family, channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            family,
            channels,
            height,
            width,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("degenerate input dims in {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        if self.family == Family::ToyCnn && (!self.height.is_multiple_of(2) || !self.width.is_multiple_of(2)) {
            return Err(Error::Config("toy-cnn needs even input dims".into()));
        }
        Ok(())
    }
}

/// Pieces needed for a class activation map: the last convolutional feature
/// maps and the linear head applied to their global average.
#[derive(Debug, Clone)]
pub struct CamFeatures {
    /// `(B, K, h, w)`
    pub features: Tensor,
    /// `(classes, K)`
    pub head_weight: Tensor,
}

pub trait Classifier: Send + Sync {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor>;

    /// Evaluation-mode final-conv features plus the head weight. Networks
    /// without a global-average-pool + linear head return an error.
    fn cam_features(&self, _x: &Tensor) -> Result<CamFeatures> {
        Err(Error::UnsupportedArchitecture(
            "network does not expose final-conv features and a linear head".into(),
        ))
    }
}

/// A built network together with the parameters it was built from.
pub struct Model {
    spec: ArchSpec,
    store: ParamStore,
    net: Box<dyn Classifier>,
}

impl Model {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn net(&self) -> &dyn Classifier {
        self.net.as_ref()
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.net.forward_t(x, train)
    }

    pub fn cam_features(&self, x: &Tensor) -> Result<CamFeatures> {
        self.net.cam_features(x)
    }

    /// Read-only copy; the result never tracks gradients.
    pub fn freeze(&self) -> Result<Model> {
        Model::from_tensors(
            self.spec,
            self.store.snapshot()?,
            true,
            self.store.dtype(),
            self.store.device(),
        )
    }

    pub fn from_tensors(
        spec: ArchSpec,
        tensors: std::collections::HashMap<String, Tensor>,
        frozen: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Model> {
        let b = if frozen {
            ParamBuilder::frozen(tensors, dtype, device)
        } else {
            ParamBuilder::load(tensors, dtype, device)
        };
        assemble(spec, b)
    }

    /// Wraps an arbitrary classifier; used for custom or hand-set teachers.
    pub fn custom(spec: ArchSpec, store: ParamStore, net: Box<dyn Classifier>) -> Model {
        Model { spec, store, net }
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("params", &self.store.weight_count())
            .finish()
    }
}

pub fn build_model(spec: ArchSpec, rng: Rng, dtype: DType, device: &Device) -> Result<Model> {
    assemble(spec, ParamBuilder::init(rng, dtype, device))
}

fn assemble(spec: ArchSpec, b: ParamBuilder) -> Result<Model> {
    spec.validate()?;
    let net: Box<dyn Classifier> = match spec.family {
        Family::ToyCnn => Box::new(ToyCnn::new(&b, spec.channels, spec.num_classes)?),
        Family::ResNet18 => Box::new(ResNet::resnet18(&b, spec.channels, spec.num_classes)?),
        Family::PreActResNet18 => Box::new(PreActResNet::preact18(&b, spec.channels, spec.num_classes)?),
        Family::WideResNet { depth, widen } => {
            Box::new(WideResNet::new(&b, depth, widen, spec.channels, spec.num_classes)?)
        }
    };
    let store = b.finish()?;
    Ok(Model { spec, store, net })
}

pub(crate) fn gap_head(features: &Tensor, head: &candle_nn::Linear) -> Result<Tensor> {
    use candle_core::Module;
    let pooled = crate::nn::global_avg_pool(features)?;
    Ok(head.forward(&pooled)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_ids_round_trip() {
        for f in [
            Family::ToyCnn,
            Family::ResNet18,
            Family::PreActResNet18,
            Family::WideResNet { depth: 28, widen: 10 },
        ] {
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
        }
        assert!(matches!("vgg-16".parse::<Family>(), Err(Error::Config(_))));
        assert!("wide-resnet-27-10".parse::<Family>().is_err());
    }
}
