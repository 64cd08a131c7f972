//! Training-only networks: the reblurring U-Net and the patch discriminators.

use candle_core::Tensor;

use crate::error::{shape_err, Result};
use crate::nn::layers::{leaky_relu, normalize_channels};
use crate::nn::{CallCounter, Conv2d, ConvConfig, Init, Scope};

const LEVELS: usize = 3;

fn conv3(scope: &mut Scope, cin: usize, cout: usize, stride: usize) -> Result<Conv2d> {
    Conv2d::new(
        scope,
        cin,
        cout,
        3,
        ConvConfig {
            stride,
            padding: 1,
            ..Default::default()
        },
    )
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            a: conv3(&mut scope.pp("conv_a"), channels, channels, 1)?,
            b: conv3(&mut scope.pp("conv_b"), channels, channels, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.b.forward(&leaky_relu(&self.a.forward(x)?, 0.2)?)? + x)?)
    }
}

/// Sharp → blurry generator: a three-level U-Net of residual blocks that
/// predicts a residual on top of its input.
#[derive(Debug, Clone)]
pub struct ReblurNet {
    head: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<Conv2d>,
    dec: Vec<ResBlock>,
    tail: Conv2d,
    calls: CallCounter,
}

impl ReblurNet {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        let c = |l: usize| channels << l;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..LEVELS {
            enc.push(ResBlock::new(&mut scope.pp(format!("enc{l}")), c(l))?);
            down.push(conv3(&mut scope.pp(format!("down{l}")), c(l), c(l + 1), 2)?);
            up.push(conv3(&mut scope.pp(format!("up{l}")), c(l + 1), c(l), 1)?);
            dec.push(ResBlock::new(&mut scope.pp(format!("dec{l}")), c(l))?);
        }
        Ok(Self {
            head: conv3(&mut scope.pp("head"), 3, c(0), 1)?,
            enc,
            down,
            mid: ResBlock::new(&mut scope.pp("mid"), c(LEVELS))?,
            up,
            dec,
            tail: conv3(&mut scope.pp("tail"), c(0), 3, 1)?,
            calls: CallCounter::default(),
        })
    }

    pub fn calls(&self) -> &CallCounter {
        &self.calls
    }

    /// `clamp(s + residual, 0, 1)` for `N×3×H×W` with sides divisible by 8.
    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = s.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!("reblur input must be N×3×H×W with sides divisible by 8, got {:?}", s.dims()));
        }
        self.calls.hit();
        let mut x = self.head.forward(s)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            x = self.enc[l].forward(&x)?;
            skips.push(x.clone());
            x = self.down[l].forward(&x)?;
        }
        x = self.mid.forward(&x)?;
        for l in (0..LEVELS).rev() {
            let (_, _, h, w) = x.dims4()?;
            x = (self.up[l].forward(&x.upsample_nearest2d(2 * h, 2 * w)?)? + &skips[l])?;
            x = self.dec[l].forward(&x)?;
        }
        Ok((s + self.tail.forward(&x)?)?.clamp(0.0, 1.0)?)
    }
}

/// Four-layer strided patch discriminator; the two inner convolutions are
/// instance-normalized. With `sigmoid` the scores are probabilities,
/// otherwise raw least-squares scores.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    sigmoid: bool,
}

impl PatchDiscriminator {
    pub fn new(scope: &mut Scope, in_channels: usize, channels: usize, sigmoid: bool) -> Result<Self> {
        let strided = ConvConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let widths = [in_channels, channels, 2 * channels, 4 * channels];
        let mut layers = Vec::new();
        for i in 0..3 {
            layers.push(Conv2d::new(&mut scope.pp(format!("conv{i}")), widths[i], widths[i + 1], 4, strided)?);
        }
        layers.push(Conv2d::with_init(
            &mut scope.pp("score"),
            widths[3],
            1,
            3,
            ConvConfig::same(3),
            Init::Uniform(1.0 / ((widths[3] * 9) as f64).sqrt()),
            Init::Zeros,
        )?);
        Ok(Self { layers, sigmoid })
    }

    /// Per-patch scores `N×1×H/8×W/8`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!("discriminator input sides must be divisible by 8, got {h}×{w}"));
        }
        let mut y = x.clone();
        for (i, conv) in self.layers[..3].iter().enumerate() {
            y = conv.forward(&y)?;
            if i > 0 {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y, 0.2)?;
        }
        let y = self.layers[3].forward(&y)?;
        if self.sigmoid {
            Ok(candle_nn::ops::sigmoid(&y)?)
        } else {
            Ok(y)
        }
    }
}

/// Zero mean and unit variance over each feature plane.
fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(normalize_channels(&x.reshape((n * c, h * w))?, 1e-5)?.reshape((n, c, h, w))?)
}
