//! Hand-written CPU kernels with explicit backward passes.
//!
//! `adaptive_filter` is the per-pixel deformable filter used inside the
//! attention block; `depthwise_conv2d` replaces candle's grouped convolution,
//! which splits into one convolution per channel. `im2col` lets dense
//! convolutions run as matrix products in both directions, since candle's
//! transposed convolution (its conv backward) is a slow direct loop.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};
use num_traits::Float;

use crate::error::{shape_err, Error, Result};

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op input must be contiguous"),
    }
}

fn tensor_vec<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.contiguous()?.flatten_all()?.to_vec1::<T>()
}

// ---------------------------------------------------------------------------
// Depth-wise convolution, stride 1, "same" zero padding, odd kernel.

#[derive(Debug, Clone, Copy)]
struct DwDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn dw_forward<T: Float>(x: &[T], wt: &[T], d: DwDims) -> Vec<T> {
    let DwDims { n, c, h, w, k } = d;
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let xp = &x[(b * c + ch) * plane..][..plane];
            let op = &mut out[(b * c + ch) * plane..][..plane];
            for a in 0..k {
                let dy = a as isize - r;
                for bb in 0..k {
                    let dx = bb as isize - r;
                    let wv = wt[(ch * k + a) * k + bb];
                    let (j0, j1) = valid_range(w, dx);
                    let (i0, i1) = valid_range(h, dy);
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let orow = &mut op[i * w..(i + 1) * w];
                        let xrow = &xp[si * w..(si + 1) * w];
                        for j in j0..j1 {
                            let sj = (j as isize + dx) as usize;
                            orow[j] = orow[j] + wv * xrow[sj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output indices `i` in `0..len` for which `i + shift` is in bounds.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn dw_backward<T: Float>(x: &[T], wt: &[T], g: &[T], d: DwDims) -> (Vec<T>, Vec<T>) {
    let DwDims { n, c, h, w, k } = d;
    let r = (k / 2) as isize;
    let plane = h * w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    for b in 0..n {
        for ch in 0..c {
            let xp = &x[(b * c + ch) * plane..][..plane];
            let gp = &g[(b * c + ch) * plane..][..plane];
            let gxp = &mut gx[(b * c + ch) * plane..][..plane];
            for a in 0..k {
                let dy = a as isize - r;
                for bb in 0..k {
                    let dx = bb as isize - r;
                    let widx = (ch * k + a) * k + bb;
                    let wv = wt[widx];
                    let (j0, j1) = valid_range(w, dx);
                    let (i0, i1) = valid_range(h, dy);
                    let mut acc = T::zero();
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let grow = &gp[i * w..(i + 1) * w];
                        let xrow = &xp[si * w..(si + 1) * w];
                        let gxrow = &mut gxp[si * w..(si + 1) * w];
                        for j in j0..j1 {
                            let sj = (j as isize + dx) as usize;
                            acc = acc + grow[j] * xrow[sj];
                            gxrow[sj] = gxrow[sj] + grow[j] * wv;
                        }
                    }
                    gw[widx] = gw[widx] + acc;
                }
            }
        }
    }
    (gx, gw)
}

struct DepthwiseConv {
    dims: DwDims,
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims;
        let shape = Shape::from((d.n, d.c, d.h, d.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(dw_forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                d,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(dw_forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                d,
            )),
            _ => candle_core::bail!("depthwise-conv2d: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = self.dims;
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (gx, gw) = dw_backward(
                    &tensor_vec::<f32>(x)?,
                    &tensor_vec::<f32>(w)?,
                    &tensor_vec::<f32>(grad)?,
                    d,
                );
                (
                    Tensor::from_vec(gx, x.shape(), x.device())?,
                    Tensor::from_vec(gw, w.shape(), w.device())?,
                )
            }
            DType::F64 => {
                let (gx, gw) = dw_backward(
                    &tensor_vec::<f64>(x)?,
                    &tensor_vec::<f64>(w)?,
                    &tensor_vec::<f64>(grad)?,
                    d,
                );
                (
                    Tensor::from_vec(gx, x.shape(), x.device())?,
                    Tensor::from_vec(gw, w.shape(), w.device())?,
                )
            }
            dt => candle_core::bail!("depthwise-conv2d: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Depth-wise convolution of `x: N×C×H×W` with `weight: C×1×K×K`, zero "same" padding.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, one, k, k2) = weight.dims4()?;
    if wc != c || one != 1 || k != k2 || k % 2 == 0 {
        return Err(shape_err!(
            "depthwise weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        ));
    }
    let op = DepthwiseConv {
        dims: DwDims { n, c, h, w, k },
    };
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, op)?)
}

// ---------------------------------------------------------------------------
// Patch extraction for dense convolution.

#[derive(Debug, Clone, Copy)]
struct ColDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Visits `(column index, source index)` for every in-bounds tap.
fn for_each_tap(d: ColDims, mut f: impl FnMut(usize, usize)) {
    let l = d.oh * d.ow;
    for b in 0..d.n {
        for ch in 0..d.c {
            let src = (b * d.c + ch) * d.h * d.w;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let row = (ch * d.k + ky) * d.k + kx;
                    let dst = (row * d.n + b) * l;
                    for oy in 0..d.oh {
                        let y = (oy * d.stride + ky) as isize - d.pad as isize;
                        if y < 0 || y >= d.h as isize {
                            continue;
                        }
                        let y = y as usize;
                        for ox in 0..d.ow {
                            let x = (ox * d.stride + kx) as isize - d.pad as isize;
                            if x >= 0 && x < d.w as isize {
                                f(dst + oy * d.ow + ox, src + y * d.w + x as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Float>(x: &[T], d: ColDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.c * d.k * d.k * d.oh * d.ow];
    for_each_tap(d, |o, i| out[o] = x[i]);
    out
}

fn col2im<T: Float>(g: &[T], d: ColDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.c * d.h * d.w];
    for_each_tap(d, |o, i| out[i] = out[i] + g[o]);
    out
}

struct Im2Col {
    dims: ColDims,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims;
        let shape = Shape::from((d.c * d.k * d.k, d.n * d.oh * d.ow));
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(im2col_forward(contiguous_slice(x, l)?, d)),
            CpuStorage::F64(x) => CpuStorage::F64(im2col_forward(contiguous_slice(x, l)?, d)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = self.dims;
        let gx = match x.dtype() {
            DType::F32 => Tensor::from_vec(col2im(&tensor_vec::<f32>(grad)?, d), x.shape(), x.device())?,
            DType::F64 => Tensor::from_vec(col2im(&tensor_vec::<f64>(grad)?, d), x.shape(), x.device())?,
            dt => candle_core::bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok(Some(gx))
    }
}

/// `N×C×H×W` → `(C·k·k) × (N·Ho·Wo)` patch matrix with zero padding; row
/// `(c·k + ky)·k + kx` matches a flattened `O×C×k×k` weight, columns run
/// over batch items, then output pixels.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(shape_err!("kernel {k} (stride {stride}, padding {pad}) does not fit {:?}", x.dims()));
    }
    let dims = ColDims {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (w + 2 * pad - k) / stride + 1,
    };
    Ok(x.contiguous()?.apply_op1(Im2Col { dims })?)
}

// ---------------------------------------------------------------------------
// Adaptive (deformable) filtering.

#[derive(Debug, Clone, Copy)]
struct FilterDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

/// Bilinear corners of a sample point: `(y, x, weight, d_weight/dy, d_weight/dx)`.
/// Corners that fall outside the image are omitted (zero padding).
#[inline]
fn bilinear_corners<T: Float>(py: T, px: T, h: usize, w: usize) -> [(usize, usize, T, T, T, bool); 4] {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let one = T::one();
    let y0i = y0.to_isize().unwrap_or(isize::MIN / 2);
    let x0i = x0.to_isize().unwrap_or(isize::MIN / 2);
    let mut out = [(0usize, 0usize, T::zero(), T::zero(), T::zero(), false); 4];
    let corners = [
        (0isize, 0isize, (one - fy) * (one - fx), -(one - fx), -(one - fy)),
        (0, 1, (one - fy) * fx, -fx, one - fy),
        (1, 0, fy * (one - fx), one - fx, -fy),
        (1, 1, fy * fx, fx, fy),
    ];
    for (slot, (oy, ox, wgt, dwy, dwx)) in out.iter_mut().zip(corners) {
        let yy = y0i + oy;
        let xx = x0i + ox;
        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            *slot = (yy as usize, xx as usize, wgt, dwy, dwx, true);
        }
    }
    out
}

/// Bilinear corners of every pixel for one tap: source index, interpolation
/// weight and its derivatives with respect to the vertical and horizontal
/// sample position. Out-of-bounds corners carry zero weights.
struct TapCorners<T> {
    src: Vec<[usize; 4]>,
    cw: Vec<[T; 4]>,
    dwy: Vec<[T; 4]>,
    dwx: Vec<[T; 4]>,
}

fn tap_corners<T: Float>(offb: &[T], t: usize, d: FilterDims) -> TapCorners<T> {
    let FilterDims { h, w, k, .. } = d;
    let plane = h * w;
    let r = (k / 2) as isize;
    let mut out = TapCorners {
        src: vec![[0; 4]; plane],
        cw: vec![[T::zero(); 4]; plane],
        dwy: vec![[T::zero(); 4]; plane],
        dwx: vec![[T::zero(); 4]; plane],
    };
    let dy = T::from((t / k) as isize - r).unwrap();
    let dx = T::from((t % k) as isize - r).unwrap();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let py = T::from(i).unwrap() + dy + offb[2 * t * plane + p];
            let px = T::from(j).unwrap() + dx + offb[(2 * t + 1) * plane + p];
            for (slot, (yy, xx, cw, gy, gx, valid)) in bilinear_corners(py, px, h, w).into_iter().enumerate() {
                if valid {
                    out.src[p][slot] = yy * w + xx;
                    out.cw[p][slot] = cw;
                    out.dwy[p][slot] = gy;
                    out.dwx[p][slot] = gx;
                }
            }
        }
    }
    out
}

fn filter_forward<T: Float>(x: &[T], off: &[T], m: &[T], d: FilterDims) -> Vec<T> {
    let FilterDims { n, c, h, w, k } = d;
    let taps = k * k;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * plane];
    for b in 0..n {
        let offb = &off[b * 2 * taps * plane..][..2 * taps * plane];
        let mb = &m[b * taps * plane..][..taps * plane];
        for t in 0..taps {
            let corners = tap_corners(offb, t, d);
            let mt = &mb[t * plane..][..plane];
            let coef: Vec<[T; 4]> = corners
                .cw
                .iter()
                .zip(mt)
                .map(|(cw, wgt)| cw.map(|v| v * *wgt))
                .collect();
            for ch in 0..c {
                let xs = &x[(b * c + ch) * plane..][..plane];
                let os = &mut out[(b * c + ch) * plane..][..plane];
                for p in 0..plane {
                    let (src, cf) = (&corners.src[p], &coef[p]);
                    os[p] = os[p] + cf[0] * xs[src[0]] + cf[1] * xs[src[1]] + cf[2] * xs[src[2]] + cf[3] * xs[src[3]];
                }
            }
        }
    }
    out
}

fn filter_backward<T: Float>(
    x: &[T],
    off: &[T],
    m: &[T],
    g: &[T],
    d: FilterDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let FilterDims { n, c, h, w, k } = d;
    let taps = k * k;
    let plane = h * w;
    let mut gx = vec![T::zero(); x.len()];
    let mut goff = vec![T::zero(); off.len()];
    let mut gm = vec![T::zero(); m.len()];
    let mut gdot = vec![[T::zero(); 4]; plane];
    for b in 0..n {
        let offb = &off[b * 2 * taps * plane..][..2 * taps * plane];
        let mb = &m[b * taps * plane..][..taps * plane];
        for t in 0..taps {
            let corners = tap_corners(offb, t, d);
            let mt = &mb[t * plane..][..plane];
            gdot.iter_mut().for_each(|v| *v = [T::zero(); 4]);
            for ch in 0..c {
                let xs = &x[(b * c + ch) * plane..][..plane];
                let gs = &g[(b * c + ch) * plane..][..plane];
                let gxs = &mut gx[(b * c + ch) * plane..][..plane];
                for p in 0..plane {
                    let gv = gs[p];
                    let scaled = gv * mt[p];
                    for q in 0..4 {
                        let src = corners.src[p][q];
                        // Σ_c g·x at this corner
                        gdot[p][q] = gdot[p][q] + gv * xs[src];
                        gxs[src] = gxs[src] + scaled * corners.cw[p][q];
                    }
                }
            }
            for p in 0..plane {
                let (mut d_m, mut d_py, mut d_px) = (T::zero(), T::zero(), T::zero());
                for q in 0..4 {
                    d_m = d_m + gdot[p][q] * corners.cw[p][q];
                    d_py = d_py + gdot[p][q] * corners.dwy[p][q];
                    d_px = d_px + gdot[p][q] * corners.dwx[p][q];
                }
                gm[(b * taps + t) * plane + p] = d_m;
                goff[(b * 2 * taps + 2 * t) * plane + p] = d_py * mt[p];
                goff[(b * 2 * taps + 2 * t + 1) * plane + p] = d_px * mt[p];
            }
        }
    }
    (gx, goff, gm)
}

struct AdaptiveFilter {
    dims: FilterDims,
}

impl CustomOp3 for AdaptiveFilter {
    fn name(&self) -> &'static str {
        "adaptive-filter"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims;
        let shape = Shape::from((d.n, d.c, d.h, d.w));
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(o), CpuStorage::F32(m)) => {
                CpuStorage::F32(filter_forward(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(o, l2)?,
                    contiguous_slice(m, l3)?,
                    d,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(o), CpuStorage::F64(m)) => {
                CpuStorage::F64(filter_forward(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(o, l2)?,
                    contiguous_slice(m, l3)?,
                    d,
                ))
            }
            _ => candle_core::bail!("adaptive-filter: unsupported or mismatched dtypes"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        off: &Tensor,
        m: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = self.dims;
        macro_rules! run {
            ($t:ty) => {{
                let (gx, goff, gm) = filter_backward(
                    &tensor_vec::<$t>(x)?,
                    &tensor_vec::<$t>(off)?,
                    &tensor_vec::<$t>(m)?,
                    &tensor_vec::<$t>(grad)?,
                    d,
                );
                (
                    Tensor::from_vec(gx, x.shape(), x.device())?,
                    Tensor::from_vec(goff, off.shape(), off.device())?,
                    Tensor::from_vec(gm, m.shape(), m.device())?,
                )
            }};
        }
        let (gx, goff, gm) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("adaptive-filter: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(goff), Some(gm)))
    }
}

/// Per-pixel filtering with learned sampling offsets and tap weights.
///
/// * `x`: `N × C × H × W` features.
/// * `offsets`: `N × 2K² × H × W`; channel `2t` is the vertical and `2t+1` the
///   horizontal displacement (pixels) of tap `t = row·K + col`.
/// * `weights`: `N × K² × H × W` tap weights shared across channels.
///
/// Each tap samples `x` bilinearly at its base-grid position plus offset,
/// treating everything outside the image as zero.
pub fn adaptive_filter(x: &Tensor, offsets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (on, oc, oh, ow) = offsets.dims4()?;
    let (mn, mc, mh, mw) = weights.dims4()?;
    let k = (mc as f64).sqrt().round() as usize;
    if k * k != mc || k % 2 == 0 {
        return Err(shape_err!("{mc} tap weights do not form an odd square kernel"));
    }
    if (on, oh, ow) != (n, h, w) || (mn, mh, mw) != (n, h, w) || oc != 2 * mc {
        return Err(shape_err!(
            "filter field {:?}/{:?} incompatible with features {:?}",
            offsets.dims(),
            weights.dims(),
            x.dims()
        ));
    }
    let finite = offsets
        .abs()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?
        .is_finite();
    if !finite {
        return Err(Error::non_finite("adaptive filter offsets"));
    }
    let op = AdaptiveFilter {
        dims: FilterDims { n, c, h, w, k },
    };
    Ok(x.contiguous()?
        .apply_op3(&offsets.contiguous()?, &weights.contiguous()?, op)?)
}
