//! Minimal neural-network plumbing on top of candle: a seeded parameter
//! store, the handful of layers the architectures need, and SGD.

mod layers;
mod optim;
mod params;

pub(crate) use layers::global_avg_pool;
pub use layers::{conv2d, linear, max_pool2x2, BatchNorm2d, Conv2d, ConvSpec};
pub use optim::{grad_norm, Sgd, SgdConfig};
pub(crate) use params::hex;
pub use params::{Buffer, Init, ParamBuilder, ParamEntry, ParamKind, ParamStore};
