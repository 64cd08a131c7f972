//! Fused per-channel kernels. Candle's broadcast backward reduces over
//! strided axes one at a time, which made bias additions and channel
//! normalization the largest cost in a training step.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};
use num_traits::Float;

use crate::error::{shape_err, Result};

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused op input must be contiguous"),
    }
}

fn to_vec<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

/// Batch, channel and per-channel plane size of an `N×C×…` tensor.
fn ncs(dims: &[usize]) -> (usize, usize, usize) {
    (dims[0], dims[1], dims[2..].iter().product())
}

struct BiasAdd;

fn bias_fwd<T: Float>(x: &[T], b: &[T], (n, c, s): (usize, usize, usize)) -> Vec<T> {
    let mut out = x.to_vec();
    for i in 0..n {
        for ch in 0..c {
            let bv = b[ch];
            out[(i * c + ch) * s..][..s].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

fn channel_sums<T: Float>(g: &[T], (n, c, s): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o = g[(i * c + ch) * s..][..s].iter().fold(*o, |a, v| a + *v);
        }
    }
    out
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "channel-bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = ncs(l1.dims());
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(bias_fwd(slice(x, l1)?, slice(b, l2)?, d)),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(bias_fwd(slice(x, l1)?, slice(b, l2)?, d)),
            _ => candle_core::bail!("channel-bias-add: unsupported or mismatched dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = ncs(x.dims());
        let gb = match grad.dtype() {
            DType::F32 => Tensor::from_vec(channel_sums(&to_vec::<f32>(grad)?, d), b.shape(), b.device())?,
            DType::F64 => Tensor::from_vec(channel_sums(&to_vec::<f64>(grad)?, d), b.shape(), b.device())?,
            dt => candle_core::bail!("channel-bias-add: unsupported dtype {dt:?}"),
        };
        Ok((Some(grad.clone()), Some(gb)))
    }
}

/// `x[n, c, …] + b[c]` for `x` of rank ≥ 2.
pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || b.dims() != [x.dim(1)?] {
        return Err(shape_err!("bias {:?} does not match input {:?}", b.dims(), x.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)?)
}

/// Normalization over the channel axis of `N×C×…` without affine terms.
struct ChannelNormalize {
    eps: f64,
}

fn norm_stats<T: Float>(x: &[T], (n, c, s): (usize, usize, usize), eps: f64) -> (Vec<T>, Vec<T>) {
    // returns normalized values and per-pixel inverse std
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); n * s];
    let cn = T::from(c).unwrap();
    let eps = T::from(eps).unwrap();
    let mut mean = vec![T::zero(); s];
    let mut var = vec![T::zero(); s];
    for i in 0..n {
        let base = i * c * s;
        mean.iter_mut().for_each(|v| *v = T::zero());
        var.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&x[base + ch * s..][..s]) {
                *m = *m + *v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / cn);
        for ch in 0..c {
            for ((q, v), m) in var.iter_mut().zip(&x[base + ch * s..][..s]).zip(&mean) {
                let d = *v - *m;
                *q = *q + d * d;
            }
        }
        for (p, q) in var.iter().enumerate() {
            inv[i * s + p] = T::one() / (*q / cn + eps).sqrt();
        }
        for ch in 0..c {
            let off = base + ch * s;
            for p in 0..s {
                y[off + p] = (x[off + p] - mean[p]) * inv[i * s + p];
            }
        }
    }
    (y, inv)
}

fn norm_backward<T: Float>(y: &[T], g: &[T], x: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, s) = dims;
    let (_, inv) = norm_stats(x, dims, eps);
    let cn = T::from(c).unwrap();
    let mut gx = vec![T::zero(); x.len()];
    let mut mg = vec![T::zero(); s];
    let mut mgy = vec![T::zero(); s];
    for i in 0..n {
        let base = i * c * s;
        mg.iter_mut().for_each(|v| *v = T::zero());
        mgy.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            let off = base + ch * s;
            for p in 0..s {
                mg[p] = mg[p] + g[off + p];
                mgy[p] = mgy[p] + g[off + p] * y[off + p];
            }
        }
        for ch in 0..c {
            let off = base + ch * s;
            for p in 0..s {
                gx[off + p] = inv[i * s + p] * (g[off + p] - mg[p] / cn - y[off + p] * mgy[p] / cn);
            }
        }
    }
    gx
}

impl CustomOp1 for ChannelNormalize {
    fn name(&self) -> &'static str {
        "channel-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = ncs(l.dims());
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(norm_stats(slice(x, l)?, d, self.eps).0),
            CpuStorage::F64(x) => CpuStorage::F64(norm_stats(slice(x, l)?, d, self.eps).0),
            _ => candle_core::bail!("channel-normalize: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = ncs(x.dims());
        let gx = match x.dtype() {
            DType::F32 => norm_backward(&to_vec::<f32>(res)?, &to_vec::<f32>(grad)?, &to_vec::<f32>(x)?, d, self.eps),
            DType::F64 => {
                let v = norm_backward(&to_vec::<f64>(res)?, &to_vec::<f64>(grad)?, &to_vec::<f64>(x)?, d, self.eps);
                return Ok(Some(Tensor::from_vec(v, x.shape(), x.device())?));
            }
            dt => candle_core::bail!("channel-normalize: unsupported dtype {dt:?}"),
        };
        Ok(Some(Tensor::from_vec(gx, x.shape(), x.device())?))
    }
}

/// Zero mean and unit variance across channels at every position.
pub fn channel_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(shape_err!("channel normalization needs rank ≥ 2, got {:?}", x.dims()));
    }
    Ok(x.contiguous()?.apply_op1(ChannelNormalize { eps })?)
}

struct ChannelScale;

fn scale_fwd<T: Float>(x: &[T], w: &[T], (n, c, s): (usize, usize, usize)) -> Vec<T> {
    let mut out = x.to_vec();
    for i in 0..n {
        for ch in 0..c {
            let wv = w[ch];
            out[(i * c + ch) * s..][..s].iter_mut().for_each(|v| *v = *v * wv);
        }
    }
    out
}

fn scale_grads<T: Float>(x: &[T], w: &[T], g: &[T], (n, c, s): (usize, usize, usize)) -> (Vec<T>, Vec<T>) {
    let gx = scale_fwd(g, w, (n, c, s));
    let mut gw = vec![T::zero(); c];
    for i in 0..n {
        for (ch, o) in gw.iter_mut().enumerate() {
            let off = (i * c + ch) * s;
            *o = x[off..off + s].iter().zip(&g[off..off + s]).fold(*o, |a, (p, q)| a + *p * *q);
        }
    }
    (gx, gw)
}

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = ncs(l1.dims());
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(scale_fwd(slice(x, l1)?, slice(w, l2)?, d)),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(scale_fwd(slice(x, l1)?, slice(w, l2)?, d)),
            _ => candle_core::bail!("channel-scale: unsupported or mismatched dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = ncs(x.dims());
        macro_rules! run {
            ($t:ty) => {{
                let (gx, gw) = scale_grads(&to_vec::<$t>(x)?, &to_vec::<$t>(w)?, &to_vec::<$t>(grad)?, d);
                (Tensor::from_vec(gx, x.shape(), x.device())?, Tensor::from_vec(gw, w.shape(), w.device())?)
            }};
        }
        let (gx, gw) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("channel-scale: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// `x[n, c, …] · w[c]`.
pub fn channel_scale(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || w.dims() != [x.dim(1)?] {
        return Err(shape_err!("scale {:?} does not match input {:?}", w.dims(), x.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, ChannelScale)?)
}
