//! Blur kernels and spatially varying blur synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample};
use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    LinearMotion,
    /// Each tile draws either a gaussian or a motion kernel.
    Mixed,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "linear_motion" => Ok(Self::LinearMotion),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// How to blur one image. `sigma_or_length` is the gaussian standard deviation
/// or the motion length in pixels; drawn kernels use up to that value.
/// `angle_deg` pins the motion direction (0 = horizontal); otherwise it is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub kind: KernelKind,
    pub kernel_size: usize,
    pub sigma_or_length: f64,
    pub tiles: usize,
    pub angle_deg: Option<f64>,
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma_or_length.is_finite() && self.sigma_or_length > 0.0) {
            return Err(Error::Config(format!(
                "blur strength must be positive, got {}",
                self.sigma_or_length
            )));
        }
        if self.tiles == 0 {
            return Err(Error::Config("tile grid must be at least 1×1".into()));
        }
        Ok(())
    }
}

/// A normalized square kernel (row-major, odd size).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    /// Builds a kernel from raw weights and rescales them to sum to 1.
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(Error::Config(format!(
                "kernel needs odd size and size² weights, got {size} and {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("kernel weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Config("kernel weights sum to zero".into()));
        }
        let weights = if sum == 1.0 {
            weights
        } else {
            weights.into_iter().map(|w| w / sum).collect()
        };
        Ok(Self { size, weights })
    }

    pub fn identity(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        w[size * size / 2] = 1.0;
        Self::new(size, w)
    }

    pub fn box_filter(size: usize) -> Result<Self> {
        Self::new(size, vec![1.0; size * size])
    }

    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        let r = (size / 2) as f64;
        let mut w = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - r;
                let dx = x as f64 - r;
                w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        Self::new(size, w)
    }

    /// A line segment of `length` pixels centred on the kernel at `angle_deg`
    /// (0 = horizontal), rasterized by midpoint supersampling so each covered
    /// pixel receives weight proportional to the segment length inside it.
    pub fn linear_motion(size: usize, length: f64, angle_deg: f64) -> Result<Self> {
        let r = (size / 2) as f64;
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let mut w = vec![0.0; size * size];
        let samples = ((length * 64.0).ceil() as usize).max(1);
        for i in 0..samples {
            let t = -length / 2.0 + (i as f64 + 0.5) * length / samples as f64;
            let x = (r + t * cos).round();
            let y = (r - t * sin).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < size && (y as usize) < size {
                w[y as usize * size + x as usize] += 1.0;
            }
        }
        Self::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn draw(spec: &BlurSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let kind = match spec.kind {
            KernelKind::Mixed => {
                if rng.random_bool(0.5) {
                    KernelKind::Gaussian
                } else {
                    KernelKind::LinearMotion
                }
            }
            k => k,
        };
        let strength = rng.random_range(0.5..=1.0) * spec.sigma_or_length;
        match kind {
            KernelKind::Gaussian => Self::gaussian(spec.kernel_size, strength),
            _ => {
                let angle = match spec.angle_deg {
                    Some(a) => a,
                    None => rng.random_range(0.0..180.0),
                };
                let length = strength.max(1.0).min(spec.kernel_size as f64);
                Self::linear_motion(spec.kernel_size, length, angle)
            }
        }
    }
}

/// Reflect-101 index (mirror without repeating the edge pixel).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Correlates the rows `y0..y1`, columns `x0..x1` of `image` with `kernel`,
/// writing into `out`.
fn filter_region(
    image: &FeatureMap,
    kernel: &Kernel,
    (y0, y1, x0, x1): (usize, usize, usize, usize),
    out: &mut FeatureMap,
) {
    let (h, w, c) = image.shape();
    let k = kernel.size();
    let r = (k / 2) as isize;
    let src = image.data();
    let mut acc = vec![0.0f64; c];
    for y in y0..y1 {
        for x in x0..x1 {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..k {
                let sy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..k {
                    let wgt = kernel.weights[ky * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kx as isize - r, w);
                    let base = (sy * w + sx) * c;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wgt * src[base + ch] as f64;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out.set(y, x, ch, *a as f32);
            }
        }
    }
}

/// Applies one kernel per tile of a `tiles × tiles` grid (row-major order).
/// Every tile samples its neighbourhood from the whole image, with reflection
/// only at the outer border.
pub fn blur_with_kernels(image: &FeatureMap, tiles: usize, kernels: &[Kernel]) -> Result<FeatureMap> {
    let (h, w, _) = image.shape();
    if tiles == 0 || kernels.len() != tiles * tiles {
        return Err(Error::Config(format!(
            "{} kernels supplied for a {tiles}×{tiles} grid",
            kernels.len()
        )));
    }
    if tiles > h || tiles > w {
        return Err(Error::Data(format!("{tiles}×{tiles} tiles do not fit a {h}×{w} image")));
    }
    for k in kernels {
        if k.size() > h || k.size() > w {
            return Err(Error::Data(format!(
                "kernel of size {} is larger than the {h}×{w} image",
                k.size()
            )));
        }
    }
    let mut out = image.clone();
    for ty in 0..tiles {
        for tx in 0..tiles {
            let region = (ty * h / tiles, (ty + 1) * h / tiles, tx * w / tiles, (tx + 1) * w / tiles);
            filter_region(image, &kernels[ty * tiles + tx], region, &mut out);
        }
    }
    Ok(out)
}

/// Blurs a sharp sample with kernels drawn independently per tile.
pub fn synthesize_blur(sharp: &ImageSample, spec: &BlurSpec, seed: u64) -> Result<ImageSample> {
    if sharp.domain != Domain::Sharp {
        return Err(Error::Data(format!(
            "scene `{}`: blur synthesis needs a sharp image",
            sharp.scene_id
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = (0..spec.tiles * spec.tiles)
        .map(|_| Kernel::draw(spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut pixels = blur_with_kernels(&sharp.pixels, spec.tiles, &kernels)?;
    pixels.clamp_unit();
    Ok(ImageSample {
        pixels,
        scene_id: sharp.scene_id.clone(),
        domain: Domain::Blurry,
    })
}
