use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nets::PatchDiscriminator;
use super::wavelet::high_freq;
use crate::error::{shape_err, Error, Result};

/// Floor applied before every logarithm of a discriminator probability.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gan: f64,
    pub cyc: f64,
    pub wave: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            cyc: 0.1,
            wave: 0.2,
            diff: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gan", self.gan), ("cyc", self.cyc), ("wave", self.wave), ("diff", self.diff)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("loss operands {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Scalar value of a rank-0 loss, failing on NaN or infinity.
pub fn scalar(loss: &Tensor, stage: &str) -> Result<f64> {
    let v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::non_finite(stage));
    }
    Ok(v)
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Generator side of the least-squares objective: `mean((D(fake) − 1)²)`.
pub fn lsgan_generator(fake: &Tensor) -> Result<Tensor> {
    Ok((fake - 1.0)?.sqr()?.mean_all()?)
}

/// Discriminator side: `mean((D(real) − 1)²) + mean(D(fake)²)`.
pub fn lsgan_discriminator(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok(((real - 1.0)?.sqr()?.mean_all()? + fake.sqr()?.mean_all()?)?)
}

fn floored_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(LOG_FLOOR)?.log()?)
}

/// `mean log D(real) + mean log(1 − D(fake))` for probabilities; the
/// discriminator maximizes it and its supremum is 0.
pub fn wave_objective(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = floored_log(real)?.mean_all()?;
    let f = floored_log(&fake.affine(-1.0, 1.0)?)?.mean_all()?;
    Ok((r + f)?)
}

/// Non-saturating generator counterpart: `−mean log D(fake)`.
pub fn wave_generator(fake: &Tensor) -> Result<Tensor> {
    Ok(floored_log(fake)?.mean_all()?.neg()?)
}

/// `‖ŝ − s‖₁ + ‖b̂ − b‖₁` (means).
pub fn cycle_loss(s: &Tensor, s_hat: &Tensor, b: &Tensor, b_hat: &Tensor) -> Result<Tensor> {
    Ok((l1(s_hat, s)? + l1(b_hat, b)?)?)
}

/// All images of one cycle pass: inputs `s`, `b`, translations `s_b = DN(b)`,
/// `b_s = RN(s)` and reconstructions `ŝ = DN(b_s)`, `b̂ = RN(s_b)`.
#[derive(Debug, Clone)]
pub struct CycleImages {
    pub s: Tensor,
    pub b: Tensor,
    pub s_b: Tensor,
    pub b_s: Tensor,
    pub s_hat: Tensor,
    pub b_hat: Tensor,
}

impl CycleImages {
    pub fn validate(&self) -> Result<()> {
        for t in [&self.b, &self.s_b, &self.b_s, &self.s_hat, &self.b_hat] {
            same_shape(&self.s, t)?;
        }
        Ok(())
    }
}

/// Generator-side adversarial and cycle terms.
pub fn gan_and_cycle(
    d_sharp: &PatchDiscriminator,
    d_blurry: &PatchDiscriminator,
    x: &CycleImages,
) -> Result<(Tensor, Tensor)> {
    x.validate()?;
    let gan = (lsgan_generator(&d_sharp.forward(&x.s_b)?)? + lsgan_generator(&d_blurry.forward(&x.b_s)?)?)?;
    Ok((gan, cycle_loss(&x.s, &x.s_hat, &x.b, &x.b_hat)?))
}

/// Discriminator-side least-squares terms for both domains (fakes detached).
pub fn domain_discriminator_loss(
    d_sharp: &PatchDiscriminator,
    d_blurry: &PatchDiscriminator,
    x: &CycleImages,
) -> Result<Tensor> {
    let ds = lsgan_discriminator(&d_sharp.forward(&x.s)?, &d_sharp.forward(&x.s_b.detach())?)?;
    let db = lsgan_discriminator(&d_blurry.forward(&x.b)?, &d_blurry.forward(&x.b_s.detach())?)?;
    Ok((ds + db)?)
}

/// Wavelet objective value for real sharp images and restored images.
pub fn wave_loss(d_wave: &PatchDiscriminator, s: &Tensor, restored: &Tensor) -> Result<Tensor> {
    same_shape(s, restored)?;
    let loss = wave_objective(&d_wave.forward(&high_freq(s)?)?, &d_wave.forward(&high_freq(restored)?)?)?;
    scalar(&loss, "wavelet loss")?;
    Ok(loss)
}

/// Generator-side wavelet term for restored images.
pub fn wave_generator_loss(d_wave: &PatchDiscriminator, restored: &Tensor) -> Result<Tensor> {
    wave_generator(&d_wave.forward(&high_freq(restored)?)?)
}

/// Weighted objective of the first stage.
pub fn stage1_total(gan: &Tensor, cyc: &Tensor, wave: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((((gan * w.gan)? + (cyc * w.cyc)?)? + (wave * w.wave)?)?)
}

/// First-stage objective plus the weighted prior reconstruction error.
pub fn stage2_total(stage1: &Tensor, z: &Tensor, z_hat: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((stage1 + (l1(z, z_hat)? * w.diff)?)?)
}
