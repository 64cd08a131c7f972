//! The prior-modulated transformer block: filtered transposed attention
//! followed by a modulated gated feed-forward unit.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{gelu, softmax_last};
use crate::nn::ops::adaptive_filter;
use crate::nn::{ChannelNorm, Conv2d, ConvConfig, Init, PdConv, Scope};

/// 1×1 conv → GELU → depth-wise 3×3 → GELU → 1×1 conv, mapping prior
/// features to a per-pixel parameter field. The last layer starts at zero
/// weight so the field initially equals its bias.
#[derive(Debug, Clone)]
pub struct PriorConvs {
    expand: Conv2d,
    depth: Conv2d,
    out: Conv2d,
}

impl PriorConvs {
    pub fn new(scope: &mut Scope, in_channels: usize, hidden: usize, out_channels: usize, out_bias: Init) -> Result<Self> {
        Ok(Self {
            expand: Conv2d::new(&mut scope.pp("expand"), in_channels, hidden, 1, ConvConfig::default())?,
            depth: Conv2d::new(
                &mut scope.pp("depth"),
                hidden,
                hidden,
                3,
                ConvConfig {
                    groups: hidden,
                    ..ConvConfig::same(3)
                },
            )?,
            out: Conv2d::with_init(
                &mut scope.pp("out"),
                hidden,
                out_channels,
                1,
                ConvConfig::default(),
                Init::Zeros,
                out_bias,
            )?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let x = gelu(&self.expand.forward(z)?)?;
        let x = gelu(&self.depth.forward(&x)?)?;
        self.out.forward(&x)
    }
}

/// Per-pixel sampling offsets (`N×2K²×H×W`, vertical then horizontal per tap,
/// in pixels) and tap weights (`N×K²×H×W`).
#[derive(Debug, Clone)]
pub struct FilterField {
    pub offsets: Tensor,
    pub weights: Tensor,
}

fn hidden_width(channels: usize, ratio: f64) -> usize {
    ((channels as f64 * ratio) as usize).max(1)
}

fn check_prior(feature: &Tensor, prior: &Tensor) -> Result<()> {
    let (fb, fc, fh, fw) = feature.dims4()?;
    let (pb, pc, ph, pw) = prior.dims4()?;
    if (fb, fc, fh, fw) != (pb, pc, ph, pw) {
        return Err(shape_err!(
            "prior {:?} does not match feature {:?}",
            prior.dims(),
            feature.dims()
        ));
    }
    Ok(())
}

/// Attention whose keys and values come from the adaptively filtered
/// feature. Channels attend to channels within each head.
#[derive(Debug, Clone)]
pub struct FmMsa {
    norm: ChannelNorm,
    offset_net: PriorConvs,
    weight_net: PriorConvs,
    q: PdConv,
    kv: PdConv,
    temperature: Tensor,
    project: Conv2d,
    heads: usize,
    kernel: usize,
}

impl FmMsa {
    pub fn new(scope: &mut Scope, channels: usize, heads: usize, kernel: usize, stack_ratio: f64) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {channels} channels")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("filter kernel size must be odd, got {kernel}")));
        }
        let hidden = hidden_width(channels, stack_ratio);
        let taps = kernel * kernel;
        let mut center = vec![0.0; taps];
        center[taps / 2] = 1.0;
        Ok(Self {
            norm: ChannelNorm::new(&mut scope.pp("norm"), channels)?,
            offset_net: PriorConvs::new(&mut scope.pp("offset_net"), channels, hidden, 2 * taps, Init::Zeros)?,
            weight_net: PriorConvs::new(&mut scope.pp("weight_net"), channels, hidden, taps, Init::Values(center))?,
            q: PdConv::new(&mut scope.pp("q"), channels, channels)?,
            kv: PdConv::new(&mut scope.pp("kv"), channels, 2 * channels)?,
            temperature: scope.var("temperature", &[heads], Init::Const(1.0))?,
            project: Conv2d::new(&mut scope.pp("project"), channels, channels, 1, ConvConfig::default())?,
            heads,
            kernel,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn predict_filter_params(&self, prior: &Tensor) -> Result<FilterField> {
        Ok(FilterField {
            offsets: self.offset_net.forward(prior)?,
            weights: self.weight_net.forward(prior)?,
        })
    }

    /// Normalized input and the attention maps, `B × heads × C' × C'`.
    fn attend(&self, f: &Tensor, prior: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = f.dims4()?;
        let normed = self.norm.forward(f)?;
        let filtered = match prior {
            Some(z) => {
                check_prior(f, z)?;
                let field = self.predict_filter_params(z)?;
                adaptive_filter(&normed, &field.offsets, &field.weights)?
            }
            None => normed.clone(),
        };
        let cp = c / self.heads;
        let split = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape((b, self.heads, cp, h * w))?) };
        let q = l2_normalize(&split(&self.q.forward(&normed)?)?)?;
        let kv = self.kv.forward(&filtered)?;
        let k = l2_normalize(&split(&kv.narrow(1, 0, c)?)?)?;
        let v = split(&kv.narrow(1, c, c)?)?;
        let logits = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .broadcast_mul(&self.temperature.reshape((1, self.heads, 1, 1))?)?;
        Ok((v, softmax_last(&logits)?))
    }

    /// Per-head channel attention maps (rows sum to one).
    pub fn attention(&self, f: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.attend(f, prior)?.1)
    }

    pub fn forward(&self, f: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = f.dims4()?;
        let (v, attn) = self.attend(f, prior)?;
        let out = attn.matmul(&v)?.reshape((b, c, h, w))?;
        Ok((self.project.forward(&out)? + f)?)
    }
}

/// Unit L2 norm along the last axis.
fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Feed-forward unit with prior-predicted scale and shift and a GELU gate.
#[derive(Debug, Clone)]
pub struct TmFfn {
    norm: ChannelNorm,
    gamma_net: PriorConvs,
    phi_net: PriorConvs,
    gate: PdConv,
    out: Conv2d,
    hidden: usize,
}

impl TmFfn {
    pub fn new(scope: &mut Scope, channels: usize, expansion: f64, stack_ratio: f64) -> Result<Self> {
        let hidden = hidden_width(channels, expansion);
        let stack = hidden_width(channels, stack_ratio);
        Ok(Self {
            norm: ChannelNorm::new(&mut scope.pp("norm"), channels)?,
            gamma_net: PriorConvs::new(&mut scope.pp("gamma_net"), channels, stack, channels, Init::Const(1.0))?,
            phi_net: PriorConvs::new(&mut scope.pp("phi_net"), channels, stack, channels, Init::Zeros)?,
            gate: PdConv::new(&mut scope.pp("gate"), channels, 2 * hidden)?,
            out: Conv2d::new(&mut scope.pp("out"), hidden, channels, 1, ConvConfig::default())?,
            hidden,
        })
    }

    /// `Norm(F) ⊙ γ + φ`, or plain `Norm(F)` without a prior.
    pub fn modulate(&self, f: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        let normed = self.norm.forward(f)?;
        match prior {
            Some(z) => {
                check_prior(f, z)?;
                let gamma = self.gamma_net.forward(z)?;
                let phi = self.phi_net.forward(z)?;
                Ok(((normed * gamma)? + phi)?)
            }
            None => Ok(normed),
        }
    }

    /// `GELU(x₁) ⊙ x₂` for the two halves of the gate projection.
    pub fn gated(&self, modulated: &Tensor) -> Result<Tensor> {
        let x = self.gate.forward(modulated)?;
        let x1 = x.narrow(1, 0, self.hidden)?;
        let x2 = x.narrow(1, self.hidden, self.hidden)?;
        Ok((gelu(&x1)? * x2)?)
    }

    pub fn forward(&self, f: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        let g = self.gated(&self.modulate(f, prior)?)?;
        Ok((self.out.forward(&g)? + f)?)
    }
}

#[derive(Debug, Clone)]
pub struct TtformerBlock {
    pub attn: FmMsa,
    pub ffn: TmFfn,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ffn_expansion: f64,
    pub stack_ratio: f64,
}

impl TtformerBlock {
    pub fn new(scope: &mut Scope, cfg: BlockConfig) -> Result<Self> {
        Ok(Self {
            attn: FmMsa::new(&mut scope.pp("attn"), cfg.channels, cfg.heads, cfg.kernel, cfg.stack_ratio)?,
            ffn: TmFfn::new(&mut scope.pp("ffn"), cfg.channels, cfg.ffn_expansion, cfg.stack_ratio)?,
        })
    }

    /// Without a prior the filter and the modulation are skipped.
    pub fn forward(&self, f: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        let x = self.attn.forward(f, prior)?;
        self.ffn.forward(&x, prior)
    }
}
