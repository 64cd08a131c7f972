//! Conditional denoising diffusion over the texture prior.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::layers::leaky_relu;
use crate::nn::{CallCounter, Conv2d, ConvConfig, Init, Scope};
use crate::tpe::PRIOR_DOWNSCALE;

/// Noise levels `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏_{i≤t} α_i` for `t = 1..=T`
/// (stored zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linearly spaced `β` from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Any `β_t ∈ [0, 1)`; zero entries give the no-noise limit used in tests.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(b.is_finite() && (0.0..1.0).contains(b))) {
            return Err(Error::Config(format!("invalid beta sequence {betas:?}")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_t` for one-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Deterministic standard-normal tensors.
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
    }
}

/// `√ᾱ_t · z + √(1 − ᾱ_t) · ε` for explicit noise.
pub fn diffuse_with(z: &Tensor, sched: &DiffusionSchedule, t: usize, noise: &Tensor) -> Result<Tensor> {
    sched.check_step(t)?;
    if z.dims() != noise.dims() {
        return Err(shape_err!("noise {:?} does not match {:?}", noise.dims(), z.dims()));
    }
    let ab = sched.alpha_bar(t);
    Ok(((z * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// Noises `z` all the way to step `T` with noise drawn from `seed`.
pub fn diffuse(z: &Tensor, sched: &DiffusionSchedule, seed: u64) -> Result<Tensor> {
    let noise = NoiseSource::new(seed).sample(z.dims(), z.dtype(), z.device())?;
    diffuse_with(z, sched, sched.steps(), &noise)
}

/// One reverse step given the predicted noise `eps_hat`:
/// `(z_t − (1−α_t)/√(1−ᾱ_t) · ε̂)/√α_t`, plus `√(1−α_t) · noise` when given.
pub fn reverse_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let one_minus_ab = 1.0 - sched.alpha_bar(t);
    if one_minus_ab <= 0.0 {
        return Err(Error::Numerical(format!(
            "reverse step {t}: cumulative alpha is 1, noise scale is undefined"
        )));
    }
    let alpha = sched.alpha(t);
    let coef = (1.0 - alpha) / one_minus_ab.sqrt();
    let mean = ((z_t - (eps_hat * coef)?)? / alpha.sqrt())?;
    match noise {
        Some(n) => Ok((mean + (n * (1.0 - alpha).sqrt())?)?),
        None => Ok(mean),
    }
}

/// Image → condition at prior resolution: one 4×4 stride-4 convolution.
#[derive(Debug, Clone)]
pub struct ConditionExtractor {
    conv: Conv2d,
}

impl ConditionExtractor {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                &mut scope.pp("conv"),
                3,
                channels,
                PRIOR_DOWNSCALE,
                ConvConfig {
                    stride: PRIOR_DOWNSCALE,
                    ..Default::default()
                },
            )?,
        })
    }

    pub fn forward(&self, b: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = b.dims4()?;
        if c != 3 || h % PRIOR_DOWNSCALE != 0 || w % PRIOR_DOWNSCALE != 0 {
            return Err(shape_err!(
                "condition input must be N×3×H×W with sides divisible by {PRIOR_DOWNSCALE}, got {:?}",
                b.dims()
            ));
        }
        self.conv.forward(b)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv3: Conv2d,
    conv1: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = leaky_relu(&self.conv3.forward(x)?, 0.2)?;
        Ok((self.conv1.forward(&y)? + x)?)
    }
}

/// Noise predictor: the condition is concatenated and fused by a 1×1
/// convolution, the step enters as a learned additive embedding, then a
/// stack of residual blocks.
#[derive(Debug, Clone)]
pub struct Denoiser {
    fuse: Conv2d,
    time_embed: Tensor,
    blocks: Vec<ResBlock>,
    out: Conv2d,
    channels: usize,
    steps: usize,
    calls: CallCounter,
}

impl Denoiser {
    pub fn new(scope: &mut Scope, channels: usize, steps: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 || steps == 0 {
            return Err(Error::Config("denoiser needs at least one block and one step".into()));
        }
        let blocks = (0..blocks)
            .map(|i| {
                let mut s = scope.pp(format!("block{i}"));
                Ok(ResBlock {
                    conv3: Conv2d::new(&mut s.pp("conv3"), channels, channels, 3, ConvConfig::same(3))?,
                    conv1: Conv2d::new(&mut s.pp("conv1"), channels, channels, 1, ConvConfig::default())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fuse: Conv2d::new(&mut scope.pp("fuse"), 2 * channels, channels, 1, ConvConfig::default())?,
            time_embed: scope.var("time_embed", &[steps, channels], Init::Normal(1.0 / (channels as f64).sqrt()))?,
            blocks,
            out: Conv2d::new(&mut scope.pp("out"), channels, channels, 1, ConvConfig::default())?,
            channels,
            steps,
            calls: CallCounter::default(),
        })
    }

    pub fn calls(&self) -> &CallCounter {
        &self.calls
    }

    /// Predicted noise `ε̂(z_t, c, t)` for one-based `t`.
    pub fn forward(&self, z_t: &Tensor, c: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.steps {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps)));
        }
        if z_t.dims() != c.dims() || z_t.dim(1)? != self.channels {
            return Err(shape_err!(
                "denoiser inputs {:?} and {:?} must match with {} channels",
                z_t.dims(),
                c.dims(),
                self.channels
            ));
        }
        self.calls.hit();
        let emb = self.time_embed.get(t - 1)?.reshape((1, self.channels, 1, 1))?;
        let mut x = self.fuse.forward(&Tensor::cat(&[z_t, c], 1)?)?.broadcast_add(&emb)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        self.out.forward(&x)
    }
}

/// One denoising step with the network's noise estimate; `noise` is ignored at `t = 1`.
pub fn denoise_step(
    z_t: &Tensor,
    c: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let eps_hat = denoiser.forward(z_t, c, t)?;
    reverse_step(z_t, &eps_hat, t, sched, if t > 1 { noise } else { None })
}

/// Reverse chain from `z_t` at step `T` down to step 0, drawing step noise
/// from `noise`. Gradients reach the denoiser and condition through the
/// final step only; earlier steps are treated as constants.
pub fn sample_chain(
    z_t: &Tensor,
    c: &Tensor,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    let c_frozen = c.detach();
    let mut z = z_t.detach();
    for t in (1..=sched.steps()).rev() {
        let z_in = z.detach();
        z = if t > 1 {
            let n = noise.sample(c.dims(), c.dtype(), c.device())?;
            denoise_step(&z_in, &c_frozen, t, sched, denoiser, Some(&n))?
        } else {
            denoise_step(&z_in, c, t, sched, denoiser, None)?
        };
    }
    Ok(z)
}

/// Prior generated from standard-normal noise, conditioned on `c`.
pub fn generate_prior(c: &Tensor, sched: &DiffusionSchedule, denoiser: &Denoiser, seed: u64) -> Result<Tensor> {
    let mut noise = NoiseSource::new(seed);
    let z_t = noise.sample(c.dims(), c.dtype(), c.device())?;
    sample_chain(&z_t, c, sched, denoiser, &mut noise)
}

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for p in parts {
        h = h.wrapping_add(p.wrapping_add(0x9E37_79B9_7F4A_7C15));
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn linear_schedule_products() {
        let s = DiffusionSchedule::linear(8, 0.1, 0.9).unwrap();
        let oracle: f64 = (0..8).map(|i| 1.0 - (0.1 + 0.8 * i as f64 / 7.0)).product();
        assert!((s.alpha_bar(8) - oracle).abs() < 1e-15);
        assert!(s.alpha_bar(8) > 0.0 && s.alpha_bar(8) < 1e-3);
        for t in 1..8 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert!(DiffusionSchedule::linear(8, 0.0, 0.5).is_err());
        assert!(DiffusionSchedule::linear(8, 0.5, 0.4).is_err());
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_beta_guarded() {
        let s = DiffusionSchedule::from_betas(vec![0.0]).unwrap();
        let z = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            diffuse(&z, &s, 3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1.0; 8]
        );
        match reverse_step(&z, &z, 1, &s, None) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("step 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn denoiser_paper_size_and_time_dependence() {
        let mut store = ParamStore::new(DType::F64, 0);
        let d = Denoiser::new(&mut store.root(), 48, 8, 5).unwrap();
        assert_eq!(store.num_params(), 123_072);
        let dev = Device::Cpu;
        let z = Tensor::randn(0f64, 1.0, (1, 48, 4, 4), &dev).unwrap();
        let c = Tensor::randn(0f64, 1.0, (1, 48, 4, 4), &dev).unwrap();
        let a = d.forward(&z, &c, 1).unwrap();
        let b = d.forward(&z, &c, 2).unwrap();
        assert_eq!(a.dims(), z.dims());
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 0.0);
        assert!(d.forward(&z, &c, 9).is_err());
        assert_eq!(d.calls().count(), 2);
    }

    #[test]
    fn condition_shape() {
        let mut store = ParamStore::new(DType::F32, 0);
        let ce = ConditionExtractor::new(&mut store.root(), 48).unwrap();
        let b = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ce.forward(&b).unwrap().dims(), &[1, 48, 16, 16]);
    }
}
