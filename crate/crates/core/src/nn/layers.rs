use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Storage, Tensor, D};
use candle_nn::Linear;

use super::params::{Buffer, Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution whose output keeps the input's spatial size (odd kernels).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

pub fn conv2d(b: &ParamBuilder, spec: ConvSpec) -> Result<Conv2d> {
    let fan_in = spec.in_channels * spec.kernel * spec.kernel;
    let weight = b.weight(
        "weight",
        (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
        Init::FanInUniform { fan_in },
    )?;
    let bias = if spec.bias {
        Some(b.weight("bias", spec.out_channels, Init::FanInUniform { fan_in })?)
    } else {
        None
    };
    Ok(Conv2d {
        weight,
        bias,
        padding: spec.padding,
        stride: spec.stride,
    })
}

/// 2-d convolution. With a constant (frozen) kernel the backward pass only
/// produces the input gradient; the stock op also builds the kernel gradient.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = if self.weight.track_op() || !x.device().is_cpu() {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        } else {
            x.contiguous()?
                .apply_op1_arc(std::sync::Arc::new(Box::new(FixedKernelConv {
                    kernel: self.weight.clone(),
                    padding: self.padding,
                    stride: self.stride,
                })))?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

struct FixedKernelConv {
    kernel: Tensor,
    padding: usize,
    stride: usize,
}

impl CustomOp1 for FixedKernelConv {
    fn name(&self) -> &'static str {
        "fixed-kernel-conv2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if !layout.is_contiguous() || layout.start_offset() != 0 {
            candle_core::bail!("fixed-kernel-conv2d expects a contiguous input");
        }
        let x = Tensor::from_storage(
            Storage::Cpu(storage.clone()),
            layout.shape().clone(),
            candle_core::op::BackpropOp::none(),
            false,
        );
        let y = x.conv2d(&self.kernel, self.padding, self.stride, 1, 1)?.contiguous()?;
        let (out, _) = y.storage_and_layout();
        match &*out {
            Storage::Cpu(s) => Ok((s.clone(), y.shape().clone())),
            _ => candle_core::bail!("fixed-kernel-conv2d runs on the cpu"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (k_h, s, p) = (self.kernel.dim(2)?, self.stride, self.padding);
        let out_size = (grad.dim(2)? - 1) * s + k_h - 2 * p;
        let out_padding = arg.dim(2)? - out_size;
        Ok(Some(grad.conv_transpose2d(&self.kernel, p, out_padding, s, 1)?))
    }
}

pub fn linear(b: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let init = Init::FanInUniform { fan_in: in_dim };
    let weight = b.weight("weight", (out_dim, in_dim), init.clone())?;
    let bias = b.weight("bias", out_dim, init)?;
    Ok(Linear::new(weight, Some(bias)))
}

/// Batch normalization over `(N, C, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Buffer,
    running_var: Buffer,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.weight("weight", channels, Init::Const(1.0))?,
            bias: b.weight("bias", channels, Init::Const(0.0))?,
            running_mean: b.buffer("running_mean", channels, Init::Const(0.0))?,
            running_var: b.buffer("running_var", channels, Init::Const(1.0))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.weight.elem_count();
        let (mean, var) = if train {
            // per-channel statistics over N, H, W
            let xt = x.transpose(0, 1)?.flatten_from(1)?;
            let n = xt.dim(1)?;
            let mean = xt.mean_keepdim(D::Minus1)?;
            let centered = xt.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            if self.running_mean.is_mutable() {
                let m = self.momentum;
                let unbiased = (var.detach() * (n as f64 / (n.max(2) - 1) as f64))?;
                let new_mean = ((self.running_mean.tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((self.running_var.tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.update(&new_mean)?;
                self.running_var.update(&new_var)?;
            }
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.tensor().reshape((1, c, 1, 1))?,
                self.running_var.tensor().reshape((1, c, 1, 1))?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let out = normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        Ok(out)
    }
}

/// Mean over the spatial dimensions: `(N, C, H, W) -> (N, C)`.
pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

/// 2x2 max pooling with stride 2, built from a reshape and two max
/// reductions. The built-in pooling op scales its gradient by the fraction
/// of tied maxima in each window, which is wrong by a factor of four in the
/// common untied case.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(crate::error::Error::Input(format!(
            "2x2 pooling needs even sides, got {h}x{w}"
        )));
    }
    Ok(x.contiguous()?.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}
