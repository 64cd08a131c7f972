use candle_core::{Tensor, D};

use super::fused::{bias_add, channel_normalize, channel_scale};
use super::ops::{depthwise_conv2d, im2col};
use super::params::{Init, Scope};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy)]
pub struct ConvConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
            bias: true,
        }
    }
}

impl ConvConfig {
    /// Stride-1 convolution that preserves spatial size for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }
}

/// 2-D convolution over `N × C × H × W` tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    config: ConvConfig,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        config: ConvConfig,
    ) -> Result<Self> {
        let fan_in = (in_channels / config.groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(
            scope,
            in_channels,
            out_channels,
            kernel,
            config,
            Init::Uniform(bound),
            Init::Uniform(bound),
        )
    }

    pub fn with_init(
        scope: &mut Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        config: ConvConfig,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        if in_channels % config.groups != 0 || out_channels % config.groups != 0 {
            return Err(shape_err!(
                "{in_channels}->{out_channels} channels not divisible into {} groups",
                config.groups
            ));
        }
        let weight = scope.var(
            "weight",
            &[out_channels, in_channels / config.groups, kernel, kernel],
            weight_init,
        )?;
        let bias = if config.bias {
            Some(scope.var("bias", &[out_channels], bias_init)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            config,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    fn is_depthwise(&self) -> bool {
        self.config.groups > 1
            && self.config.groups == self.in_channels
            && self.in_channels == self.out_channels
            && self.config.stride == 1
            && self.config.padding == self.kernel / 2
            && self.kernel % 2 == 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let ConvConfig {
            stride,
            padding,
            groups,
            ..
        } = self.config;
        let y = if self.is_depthwise() {
            depthwise_conv2d(x, &self.weight)?
        } else if groups == 1 {
            if c != self.in_channels {
                return Err(shape_err!("conv expects {} channels, got {c}", self.in_channels));
            }
            conv2d(x, &self.weight, stride, padding)?
        } else {
            x.conv2d(&self.weight, padding, stride, 1, groups)?
        };
        match &self.bias {
            Some(b) => bias_add(&y, b),
            None => Ok(y),
        }
    }
}

/// Dense (ungrouped) convolution of `x` (`N×C×H×W`) with `weight`
/// (`O×C×k×k`), computed as one 2-D matrix product over the whole batch;
/// batched products with a broadcast weight have a slow backward.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(shape_err!("cannot convolve {:?} with weight {:?}", x.dims(), weight.dims()));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?
    } else {
        im2col(x, k, stride, padding)?
    };
    Ok(weight
        .reshape((o, c * k * k))?
        .matmul(&cols)?
        .reshape((o, n, oh, ow))?
        .transpose(0, 1)?
        .contiguous()?)
}

/// Layer normalization across the channel axis of an `N × C × H × W` tensor.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.var("weight", &[channels], Init::Const(1.0))?,
            bias: scope.var("bias", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        bias_add(&channel_scale(&normalize_channels(x, self.eps)?, &self.weight)?, &self.bias)
    }
}

/// Zero-mean, unit-variance per pixel across channels (no affine).
pub fn normalize_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    channel_normalize(x, eps)
}

/// Fully connected layer acting on the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: scope.var("weight", &[out_features, in_features], Init::Uniform(bound))?,
            bias: scope.var("bias", &[out_features], Init::Uniform(bound))?,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

/// Point-wise 1×1 convolution followed by a 3×3 depth-wise convolution.
#[derive(Debug, Clone)]
pub struct PdConv {
    point: Conv2d,
    depth: Conv2d,
}

impl PdConv {
    pub fn new(scope: &mut Scope, in_channels: usize, out_channels: usize) -> Result<Self> {
        let point = Conv2d::new(
            &mut scope.pp("point"),
            in_channels,
            out_channels,
            1,
            ConvConfig::default(),
        )?;
        let depth = Conv2d::new(
            &mut scope.pp("depth"),
            out_channels,
            out_channels,
            3,
            ConvConfig {
                groups: out_channels,
                ..ConvConfig::same(3)
            },
        )?;
        Ok(Self { point, depth })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.depth.forward(&self.point.forward(x)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Mean over every element, returned as a rank-0 tensor.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_all()?)
}

/// Softmax along the last axis (differentiable composite form).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
