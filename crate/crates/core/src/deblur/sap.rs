//! Resizing the texture prior to each network scale.

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, ConvConfig, Scope};

/// `out × len` averaging matrix; bin `i` covers `[⌊i·len/out⌋, ⌈(i+1)·len/out⌉)`.
/// When `out > len` each bin holds a single source element.
pub fn pooling_matrix(len: usize, out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if len == 0 || out == 0 {
        return Err(shape_err!("cannot pool {len} elements into {out} bins"));
    }
    let mut m = vec![0.0f64; out * len];
    for i in 0..out {
        let start = i * len / out;
        let end = ((i + 1) * len).div_ceil(out);
        let n = (end - start) as f64;
        for j in start..end {
            m[i * len + j] = 1.0 / n;
        }
    }
    Ok(Tensor::from_vec(m, (out, len), device)?.to_dtype(dtype)?)
}

/// Adaptive average pooling of `N×C×H×W` to `N×C×out_h×out_w`.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ph = pooling_matrix(h, out_h, x.dtype(), x.device())?;
    let pw = pooling_matrix(w, out_w, x.dtype(), x.device())?;
    let y = x.broadcast_matmul(&pw.t()?.contiguous()?)?;
    Ok(ph.broadcast_matmul(&y)?)
}

/// Adaptive pooling to the scale's size followed by a 1×1 projection to its width.
#[derive(Debug, Clone)]
pub struct Sap {
    proj: Conv2d,
}

impl Sap {
    pub fn new(scope: &mut Scope, prior_channels: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(scope, prior_channels, channels, 1, ConvConfig::default())?,
        })
    }

    pub fn forward(&self, prior: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        self.proj.forward(&adaptive_avg_pool(prior, height, width)?)
    }
}
