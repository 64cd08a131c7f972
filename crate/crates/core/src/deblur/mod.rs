//! Four-scale encoder–decoder of prior-modulated transformer blocks.

pub mod block;
pub mod sap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{CallCounter, Conv2d, ConvConfig, Scope};
pub use block::{BlockConfig, FilterField, FmMsa, PriorConvs, TmFfn, TtformerBlock};
pub use sap::{adaptive_avg_pool, Sap};

pub const SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeblurConfig {
    pub base_channels: usize,
    pub blocks: [usize; SCALES],
    pub heads: [usize; SCALES],
    pub kernel_size: usize,
    /// Hidden width of the gated feed-forward unit relative to the block width.
    pub ffn_expansion: f64,
    /// Hidden width of the parameter-predicting conv stacks relative to the block width.
    pub stack_ratio: f64,
    pub prior_channels: usize,
}

impl DeblurConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            blocks: [1, 2, 2, 1],
            heads: [1, 1, 2, 2],
            kernel_size: 3,
            ffn_expansion: 1.0,
            stack_ratio: 0.25,
            prior_channels: 16,
        }
    }

    pub fn paper() -> Self {
        Self {
            base_channels: 48,
            blocks: [4, 6, 6, 4],
            heads: [1, 2, 4, 8],
            kernel_size: 5,
            ffn_expansion: 1.0,
            stack_ratio: 0.25,
            prior_channels: 48,
        }
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.prior_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("filter kernel size must be odd, got {}", self.kernel_size)));
        }
        for s in 0..SCALES {
            let (c, h) = (self.channels(s), self.heads[s]);
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!("scale {s}: {h} heads do not divide {c} channels")));
            }
        }
        if !(self.ffn_expansion > 0.0 && self.stack_ratio > 0.0) {
            return Err(Error::Config("width ratios must be positive".into()));
        }
        Ok(())
    }

    fn block(&self, scale: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels(scale),
            heads: self.heads[scale],
            kernel: self.kernel_size,
            ffn_expansion: self.ffn_expansion,
            stack_ratio: self.stack_ratio,
        }
    }
}

/// Which scales receive the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorInjection {
    AllScales,
    FirstScale,
    /// Blocks run without filtering or modulation.
    Off,
}

#[derive(Debug, Clone)]
pub struct DeblurNet {
    config: DeblurConfig,
    injection: PriorInjection,
    embed: Conv2d,
    encoder: Vec<Vec<TtformerBlock>>,
    down: Vec<Conv2d>,
    bottleneck: Vec<TtformerBlock>,
    up: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
    decoder: Vec<Vec<TtformerBlock>>,
    sap: Vec<Sap>,
    head: Conv2d,
    calls: CallCounter,
}

fn blocks(scope: &mut Scope, n: usize, cfg: BlockConfig) -> Result<Vec<TtformerBlock>> {
    (0..n).map(|i| TtformerBlock::new(&mut scope.pp(i), cfg)).collect()
}

impl DeblurNet {
    pub fn new(scope: &mut Scope, config: &DeblurConfig, injection: PriorInjection) -> Result<Self> {
        config.validate()?;
        let c = |s| config.channels(s);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..SCALES - 1 {
            encoder.push(blocks(&mut scope.pp(format!("encoder{s}")), config.blocks[s], config.block(s))?);
            down.push(Conv2d::new(
                &mut scope.pp(format!("down{s}")),
                c(s),
                c(s + 1),
                3,
                ConvConfig {
                    stride: 2,
                    padding: 1,
                    ..Default::default()
                },
            )?);
            up.push(Conv2d::new(&mut scope.pp(format!("up{s}")), c(s + 1), c(s), 3, ConvConfig::same(3))?);
            fuse.push(Conv2d::new(&mut scope.pp(format!("fuse{s}")), 2 * c(s), c(s), 1, ConvConfig::default())?);
            decoder.push(blocks(&mut scope.pp(format!("decoder{s}")), config.blocks[s], config.block(s))?);
        }
        let bottleneck = blocks(&mut scope.pp("bottleneck"), config.blocks[3], config.block(3))?;
        let sap = (0..SCALES)
            .map(|s| Sap::new(&mut scope.pp(format!("sap{s}")), config.prior_channels, c(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            injection,
            embed: Conv2d::new(&mut scope.pp("embed"), 3, c(0), 3, ConvConfig::same(3))?,
            encoder,
            down,
            bottleneck,
            up,
            fuse,
            decoder,
            sap,
            head: Conv2d::new(&mut scope.pp("head"), c(0), 3, 3, ConvConfig::same(3))?,
            calls: CallCounter::default(),
        })
    }

    pub fn config(&self) -> &DeblurConfig {
        &self.config
    }

    pub fn injection(&self) -> PriorInjection {
        self.injection
    }

    pub fn calls(&self) -> &CallCounter {
        &self.calls
    }

    fn prior_at(&self, prior: Option<&Tensor>, scale: usize, h: usize, w: usize) -> Result<Option<Tensor>> {
        let wanted = match self.injection {
            PriorInjection::AllScales => true,
            PriorInjection::FirstScale => scale == 0,
            PriorInjection::Off => false,
        };
        match prior {
            Some(z) if wanted => Ok(Some(self.sap[scale].forward(z, h, w)?)),
            _ => Ok(None),
        }
    }

    /// Restores a blurry batch `N×3×H×W` (sides divisible by 8) guided by
    /// `prior` (`N×C_prior×h×w`); returns `clamp(b + residual, 0, 1)`.
    pub fn forward(&self, b: &Tensor, prior: Option<&Tensor>) -> Result<Tensor> {
        let (n, ch, h, w) = b.dims4()?;
        if ch != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!("deblur input must be N×3×H×W with sides divisible by 8, got {:?}", b.dims()));
        }
        if let Some(z) = prior {
            let (pn, pc, _, _) = z.dims4()?;
            if pn != n || pc != self.config.prior_channels {
                return Err(shape_err!("prior {:?} does not fit input {:?}", z.dims(), b.dims()));
            }
        }
        self.calls.hit();
        let priors = (0..SCALES)
            .map(|s| self.prior_at(prior, s, h >> s, w >> s))
            .collect::<Result<Vec<_>>>()?;

        let mut x = self.embed.forward(b)?;
        let mut skips = Vec::with_capacity(SCALES - 1);
        for s in 0..SCALES - 1 {
            for blk in &self.encoder[s] {
                x = blk.forward(&x, priors[s].as_ref())?;
            }
            skips.push(x.clone());
            x = self.down[s].forward(&x)?;
        }
        for blk in &self.bottleneck {
            x = blk.forward(&x, priors[3].as_ref())?;
        }
        for s in (0..SCALES - 1).rev() {
            let up = x.upsample_nearest2d(h >> s, w >> s)?;
            x = self.up[s].forward(&up)?;
            x = self.fuse[s].forward(&Tensor::cat(&[&x, &skips[s]], 1)?)?;
            for blk in &self.decoder[s] {
                x = blk.forward(&x, priors[s].as_ref())?;
            }
        }
        let residual = self.head.forward(&x)?;
        Ok((b + residual)?.clamp(0.0, 1.0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn shape_preserved_and_bad_sizes_rejected() {
        let cfg = DeblurConfig::desk();
        let mut store = ParamStore::new(DType::F32, 0);
        let net = DeblurNet::new(&mut store.root(), &cfg, PriorInjection::AllScales).unwrap();
        let dev = Device::Cpu;
        let b = Tensor::rand(0f32, 1.0, (2, 3, 16, 24), &dev).unwrap();
        let z = Tensor::rand(0f32, 1.0, (2, 16, 4, 6), &dev).unwrap();
        let y = net.forward(&b, Some(&z)).unwrap();
        assert_eq!(y.dims(), b.dims());
        let bad = Tensor::zeros((1, 3, 12, 16), DType::F32, &dev).unwrap();
        assert!(net.forward(&bad, None).is_err());
    }

    #[test]
    fn zero_head_returns_clamped_input() {
        let cfg = DeblurConfig::desk();
        let mut store = ParamStore::new(DType::F32, 1);
        let net = DeblurNet::new(&mut store.root(), &cfg, PriorInjection::AllScales).unwrap();
        for name in ["head.weight", "head.bias"] {
            let v = store.get(name).unwrap().as_tensor().zeros_like().unwrap();
            store.assign(name, &v).unwrap();
        }
        let dev = Device::Cpu;
        let b = Tensor::rand(-0.5f32, 1.5, (1, 3, 8, 8), &dev).unwrap();
        let z = Tensor::rand(0f32, 1.0, (1, 16, 2, 2), &dev).unwrap();
        let y = net.forward(&b, Some(&z)).unwrap();
        let want = b.clamp(0.0, 1.0).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            want.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn heads_validated() {
        let mut cfg = DeblurConfig::desk();
        cfg.heads = [3, 1, 1, 1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
