//! Brute-force reference implementations and small helpers shared by the
//! integration tests. Everything here works on plain `Vec<f64>` with explicit
//! loops so that it shares no code with the library.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major matrix product of `a (r×k)` and `b (k×c)`.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for q in 0..k {
                s += a[i * k + q] * b[q * c + j];
            }
            out[i * c + j] = s;
        }
    }
    out
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Memory enhancement: attention of memory rows (`n×l`) over tokens
/// (`t×l`), a fully connected layer with weight `l×l` (out, in) and bias,
/// and the element-wise product with the memory. Returns (enhanced, attn).
pub fn enhance_oracle(
    mem: &[f64],
    tokens: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    t: usize,
    l: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut attn = vec![0.0; n * t];
    for i in 0..n {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..l).map(|q| mem[i * l + q] * tokens[j * l + q]).sum())
            .collect();
        attn[i * t..(i + 1) * t].copy_from_slice(&softmax_row(&scores));
    }
    let mixed = matmul(&attn, tokens, n, t, l);
    let mut enhanced = vec![0.0; n * l];
    for i in 0..n {
        for o in 0..l {
            let fc: f64 = bias[o] + (0..l).map(|q| weight[o * l + q] * mixed[i * l + q]).sum::<f64>();
            enhanced[i * l + o] = mem[i * l + o] * fc;
        }
    }
    (enhanced, attn)
}

/// For every token the index of the highest-scoring memory row (first on
/// ties) and the selected rows.
pub fn select_oracle(tokens: &[f64], enhanced: &[f64], t: usize, n: usize, l: usize) -> (Vec<u32>, Vec<f64>) {
    let mut idx = Vec::with_capacity(t);
    let mut rows = Vec::with_capacity(t * l);
    for j in 0..t {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..n {
            let s: f64 = (0..l).map(|q| tokens[j * l + q] * enhanced[i * l + q]).sum();
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        idx.push(best as u32);
        rows.extend_from_slice(&enhanced[best * l..(best + 1) * l]);
    }
    (idx, rows)
}

fn pixel(x: &[f64], h: usize, w: usize, y: isize, xx: isize) -> f64 {
    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
        0.0
    } else {
        x[y as usize * w + xx as usize]
    }
}

/// Bilinear sample of one `h×w` plane at a real position, zero outside.
pub fn bilinear(x: &[f64], h: usize, w: usize, py: f64, px: f64) -> f64 {
    let y0 = py.floor();
    let x0 = px.floor();
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    pixel(x, h, w, y0, x0) * (1.0 - fy) * (1.0 - fx)
        + pixel(x, h, w, y0, x0 + 1) * (1.0 - fy) * fx
        + pixel(x, h, w, y0 + 1, x0) * fy * (1.0 - fx)
        + pixel(x, h, w, y0 + 1, x0 + 1) * fy * fx
}

/// Per-pixel deformable filter. `x`: N×C×H×W, `off`: N×2K²×H×W (dy, dx per
/// tap), `m`: N×K²×H×W.
pub fn adaptive_filter_oracle(x: &[f64], off: &[f64], m: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let taps = k * k;
    let r = (k / 2) as f64;
    let plane = h * w;
    let mut out = vec![0.0; n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let t = ky * k + kx;
                            let dy = off[((b * 2 * taps) + 2 * t) * plane + i * w + j];
                            let dx = off[((b * 2 * taps) + 2 * t + 1) * plane + i * w + j];
                            let wt = m[(b * taps + t) * plane + i * w + j];
                            let py = i as f64 + ky as f64 - r + dy;
                            let px = j as f64 + kx as f64 - r + dx;
                            acc += wt * bilinear(src, h, w, py, px);
                        }
                    }
                    out[(b * c + ch) * plane + i * w + j] = acc;
                }
            }
        }
    }
    out
}

/// Cumulative products of `1 − β`.
pub fn alpha_bars(betas: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

pub fn diffuse_oracle(z: &[f64], eps: &[f64], betas: &[f64], t: usize) -> Vec<f64> {
    let ab = alpha_bars(betas)[t - 1];
    z.iter().zip(eps).map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e).collect()
}

pub fn reverse_oracle(z: &[f64], eps_hat: &[f64], noise: Option<&[f64]>, betas: &[f64], t: usize) -> Vec<f64> {
    let beta = betas[t - 1];
    let alpha = 1.0 - beta;
    let ab = alpha_bars(betas)[t - 1];
    (0..z.len())
        .map(|i| {
            let mean = (z[i] - beta / (1.0 - ab).sqrt() * eps_hat[i]) / alpha.sqrt();
            mean + noise.map_or(0.0, |n| beta.sqrt() * n[i])
        })
        .collect()
}

/// Haar bands `(ll, lh, hl, hh)` of one `h×w` plane from explicit 2×2
/// block sums.
pub fn haar_oracle(x: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let (oh, ow) = (h / 2, w / 2);
    let mut bands = [vec![0.0; oh * ow], vec![0.0; oh * ow], vec![0.0; oh * ow], vec![0.0; oh * ow]];
    for i in 0..oh {
        for j in 0..ow {
            let a = x[(2 * i) * w + 2 * j];
            let b = x[(2 * i) * w + 2 * j + 1];
            let c = x[(2 * i + 1) * w + 2 * j];
            let d = x[(2 * i + 1) * w + 2 * j + 1];
            let p = i * ow + j;
            bands[0][p] = (a + b + c + d) / 2.0;
            bands[1][p] = (a - b + c - d) / 2.0;
            bands[2][p] = (a + b - c - d) / 2.0;
            bands[3][p] = (a - b - c + d) / 2.0;
        }
    }
    bands
}

pub fn psnr_oracle(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (peak * peak / mse).log10()).min(100.0)
    }
}

/// SSIM of interleaved `h×w×c` images: a full 2-D Gaussian window at every
/// valid position, statistics computed directly from the window sums.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, c: usize, win: usize, sigma: f64, peak: f64) -> f64 {
    let center = (win as f64 - 1.0) / 2.0;
    let mut kernel = vec![0.0; win * win];
    for u in 0..win {
        for v in 0..win {
            let d2 = (u as f64 - center).powi(2) + (v as f64 - center).powi(2);
            kernel[u * win + v] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= ksum);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let at = |m: &[f64], y: usize, x: usize| m[(y * w + x) * c + ch];
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=h - win {
            for x in 0..=w - win {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..win {
                    for v in 0..win {
                        let g = kernel[u * win + v];
                        let p = at(a, y + u, x + v);
                        let q = at(b, y + u, x + v);
                        mx += g * p;
                        my += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / c as f64
}

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}
pub mod suites;
