//! Level-1 orthonormal Haar transform.
//!
//! For each 2×2 block `[a b; c d]` (a at the top left):
//! `ll = (a+b+c+d)/2`, `lh = (a−b+c−d)/2` (horizontal variation, i.e. vertical
//! edges), `hl = (a+b−c−d)/2` (vertical variation), `hh = (a−b−c+d)/2`.

use candle_core::{Device, Tensor};

use crate::error::{shape_err, Result};
use crate::nn::layers::conv2d;

#[derive(Debug, Clone)]
pub struct HaarBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

const FILTERS: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

fn filter_bank(x: &Tensor) -> Result<Tensor> {
    let flat: Vec<f64> = FILTERS.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (4, 1, 2, 2), &Device::Cpu)?.to_dtype(x.dtype())?)
}

/// Analysis of `N×C×H×W` (even sides) into four `N×C×H/2×W/2` bands.
pub fn dwt(x: &Tensor) -> Result<HaarBands> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(shape_err!("Haar transform needs even sides, got {h}×{w}"));
    }
    let y = conv2d(&x.reshape((n * c, 1, h, w))?, &filter_bank(x)?, 2, 0)?
        .reshape((n, c, 4, h / 2, w / 2))?;
    let band = |i| -> Result<Tensor> { Ok(y.narrow(2, i, 1)?.squeeze(2)?) };
    Ok(HaarBands {
        ll: band(0)?,
        lh: band(1)?,
        hl: band(2)?,
        hh: band(3)?,
    })
}

/// The three detail bands concatenated on the channel axis: `N×3C×H/2×W/2`.
pub fn high_freq(x: &Tensor) -> Result<Tensor> {
    let b = dwt(x)?;
    Ok(Tensor::cat(&[&b.lh, &b.hl, &b.hh], 1)?)
}

/// Synthesis; exact inverse of [`dwt`].
pub fn idwt(bands: &HaarBands) -> Result<Tensor> {
    let HaarBands { ll, lh, hl, hh } = bands;
    let (n, c, h, w) = ll.dims4()?;
    for b in [lh, hl, hh] {
        if b.dims() != ll.dims() {
            return Err(shape_err!("Haar bands differ in shape: {:?} vs {:?}", b.dims(), ll.dims()));
        }
    }
    let half = |t: Tensor| -> Result<Tensor> { Ok((t * 0.5)?) };
    let a = half(((ll + lh)? + (hl + hh)?)?)?;
    let b = half(((ll - lh)? + (hl - hh)?)?)?;
    let cc = half(((ll + lh)? - (hl + hh)?)?)?;
    let d = half(((ll - lh)? - (hl - hh)?)?)?;
    let top = Tensor::stack(&[a, b], 4)?.reshape((n, c, h, 2 * w))?;
    let bottom = Tensor::stack(&[cc, d], 4)?.reshape((n, c, h, 2 * w))?;
    Ok(Tensor::stack(&[top, bottom], 3)?.reshape((n, c, 2 * h, 2 * w))?)
}
