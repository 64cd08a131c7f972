//! Texture prior encoder.
//!
//! Sharp-image tokens refine a learnable memory bank through attention; each
//! blurry-image token is then replaced by its best-matching refined memory
//! row. The resulting map is the texture prior that conditions deblurring
//! and that the diffusion model learns to regenerate.

use candle_core::{DType, IndexOp, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{leaky_relu, softmax_last};
use crate::nn::{CallCounter, Conv2d, ConvConfig, Init, Linear, Scope};

/// Spatial reduction from image to prior.
pub const PRIOR_DOWNSCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Sharp,
    Blurry,
}

/// Two stride-2 3×3 convolutions, 3 → C → C.
#[derive(Debug, Clone)]
pub struct TokenEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl TokenEncoder {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        let down = ConvConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv1: Conv2d::new(&mut scope.pp("conv1"), 3, channels, 3, down)?,
            conv2: Conv2d::new(&mut scope.pp("conv2"), channels, channels, 3, down)?,
        })
    }

    /// `N×3×H×W` image → `N×C×H/4×W/4` tokens.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h % PRIOR_DOWNSCALE != 0 || w % PRIOR_DOWNSCALE != 0 {
            return Err(shape_err!(
                "token encoder needs 3 channels and sides divisible by {PRIOR_DOWNSCALE}, got {:?}",
                image.dims()
            ));
        }
        let x = leaky_relu(&self.conv1.forward(image)?, 0.2)?;
        self.conv2.forward(&x)
    }
}

/// Result of replacing blurry tokens with memory rows.
#[derive(Debug, Clone)]
pub struct Transfer {
    /// `HW × L`: exactly the selected rows in the forward pass, with the
    /// gradient of the softmax-weighted mixture.
    pub tokens: Tensor,
    pub indices: Vec<u32>,
}

fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(stage))
    }
}

/// Attention of each memory row over the sharp tokens (`N × HW`, rows sum to 1)
/// and the refined memory `M ⊙ FC(Attn · Z)` (`N × L`).
pub fn enhance_memory(memory: &Tensor, fc: &Linear, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, l) = memory.dims2()?;
    let (_, tl) = tokens.dims2()?;
    if l != tl {
        return Err(shape_err!("memory width {l} differs from token width {tl}"));
    }
    let logits = memory.matmul(&tokens.t()?)?;
    ensure_finite(&logits, "memory enhancement scores")?;
    let attn = softmax_last(&logits)?;
    ensure_finite(&attn, "memory enhancement attention")?;
    let refined = fc.forward(&attn.matmul(tokens)?)?;
    let enhanced = (memory * refined)?;
    ensure_finite(&enhanced, "enhanced memory")?;
    Ok((enhanced, attn))
}

/// Index of the largest score in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<u32>> {
    let rows = scores.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect())
}

/// Softmax-weighted mixture of memory rows used for the backward pass.
pub fn soft_transfer(tokens: &Tensor, enhanced: &Tensor) -> Result<Tensor> {
    Ok(softmax_last(&tokens.matmul(&enhanced.t()?)?)?.matmul(enhanced)?)
}

/// Rows of `enhanced` selected by `indices`, detached.
pub fn hard_transfer(enhanced: &Tensor, indices: &[u32]) -> Result<Tensor> {
    let idx = Tensor::new(indices, enhanced.device())?;
    Ok(enhanced.detach().index_select(&idx, 0)?)
}

/// Replaces every blurry token (`HW × L`) with its highest-scoring memory row.
pub fn transfer_texture(tokens: &Tensor, enhanced: &Tensor) -> Result<Transfer> {
    let (_, l) = tokens.dims2()?;
    let (_, ml) = enhanced.dims2()?;
    if l != ml {
        return Err(shape_err!("token width {l} differs from memory width {ml}"));
    }
    let scores = tokens.matmul(&enhanced.t()?)?;
    ensure_finite(&scores, "texture transfer scores")?;
    let indices = argmax_rows(&scores)?;
    let hard = hard_transfer(enhanced, &indices)?;
    let soft = soft_transfer(tokens, enhanced)?;
    // forward value is exactly `hard`; gradient is that of `soft`
    let tokens = (hard + (&soft - soft.detach())?)?;
    Ok(Transfer { tokens, indices })
}

/// `C×h×w` → `hw×C`.
fn to_tokens(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    Ok(map.reshape((c, h * w))?.t()?.contiguous()?)
}

fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, c) = tokens.dims2()?;
    Ok(tokens.t()?.reshape((c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct TexturePriorEncoder {
    sharp: TokenEncoder,
    blurry: TokenEncoder,
    memory: Tensor,
    fc: Linear,
    channels: usize,
    calls: CallCounter,
}

impl TexturePriorEncoder {
    pub fn new(scope: &mut Scope, channels: usize, memory_size: usize) -> Result<Self> {
        if channels == 0 || memory_size == 0 {
            return Err(Error::Config("prior channels and memory size must be positive".into()));
        }
        let std = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            sharp: TokenEncoder::new(&mut scope.pp("sharp_encoder"), channels)?,
            blurry: TokenEncoder::new(&mut scope.pp("blurry_encoder"), channels)?,
            memory: scope.var("memory", &[memory_size, channels], Init::Normal(std))?,
            fc: Linear::new(&mut scope.pp("fc"), channels, channels)?,
            channels,
            calls: CallCounter::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn calls(&self) -> &CallCounter {
        &self.calls
    }

    pub fn memory(&self) -> &Tensor {
        &self.memory
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }

    pub fn encode(&self, image: &Tensor, branch: Branch) -> Result<Tensor> {
        let z = match branch {
            Branch::Sharp => self.sharp.forward(image)?,
            Branch::Blurry => self.blurry.forward(image)?,
        };
        ensure_finite(
            &z,
            match branch {
                Branch::Sharp => "sharp token encoder",
                Branch::Blurry => "blurry token encoder",
            },
        )?;
        Ok(z)
    }

    /// Refined memory for every batch item of `z_s` (`B×C×h×w` → `B×N×L`).
    pub fn enhance(&self, z_s: &Tensor) -> Result<Tensor> {
        let b = z_s.dim(0)?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            out.push(enhance_memory(&self.memory, &self.fc, &to_tokens(&z_s.i(i)?)?)?.0);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    /// Prior for blurry tokens `z_b` given per-item refined memories.
    pub fn transfer(&self, z_b: &Tensor, enhanced: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = z_b.dims4()?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let t = transfer_texture(&to_tokens(&z_b.i(i)?)?, &enhanced.i(i)?)?;
            out.push(from_tokens(&t.tokens, h, w)?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    /// Prior from an unpaired sharp batch `s` and blurry batch `b`.
    pub fn forward(&self, s: &Tensor, b: &Tensor) -> Result<Tensor> {
        if s.dims() != b.dims() {
            return Err(shape_err!(
                "sharp {:?} and blurry {:?} batches differ in shape",
                s.dims(),
                b.dims()
            ));
        }
        self.calls.hit();
        let enhanced = self.enhance(&self.encode(s, Branch::Sharp)?)?;
        self.transfer(&self.encode(b, Branch::Blurry)?, &enhanced)
    }

    /// Blurry-branch tokens used directly as the prior, bypassing the memory.
    /// This is the plain latent-encoder ablation.
    pub fn plain(&self, b: &Tensor) -> Result<Tensor> {
        self.calls.hit();
        self.encode(b, Branch::Blurry)
    }
}
