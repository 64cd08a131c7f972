//! Dense height × width × channels arrays.
//!
//! [`FeatureMap`] is the interchange type between image I/O, the data
//! pipeline and the networks. Networks themselves work on batched
//! `N × C × H × W` tensors; the conversions live here.

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{} values cannot fill a {height}x{width}x{channels} map",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copies the `size × size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{} map",
                self.height,
                self.width
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let (h, w, c) = self.shape();
        Self::from_fn(h, w, c, |y, x, ch| self.get(y, w - 1 - x, ch))
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        let (h, w, c) = self.shape();
        Self::from_fn(h, w, c, |y, x, ch| self.get(h - 1 - y, x, ch))
    }

    /// `1 × C × H × W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::stack(std::slice::from_ref(self), dtype, device)
    }

    /// Stacks equally shaped maps into an `N × C × H × W` tensor.
    pub fn stack(maps: &[FeatureMap], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = maps
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty list of feature maps"))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(maps.len() * h * w * c);
        for map in maps {
            if map.shape() != first.shape() {
                return Err(shape_err!(
                    "cannot stack {:?} with {:?}",
                    map.shape(),
                    first.shape()
                ));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(map.get(y, x, ch));
                    }
                }
            }
        }
        let t = Tensor::from_vec(data, (maps.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits an `N × C × H × W` tensor back into `N` maps.
    pub fn unstack(tensor: &Tensor) -> Result<Vec<FeatureMap>> {
        let (n, c, h, w) = tensor.dims4()?;
        let flat = tensor
            .to_dtype(DType::F32)?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let base = b * c * plane;
            out.push(Self::from_fn(h, w, c, |y, x, ch| {
                flat[base + ch * plane + y * w + x]
            }));
        }
        Ok(out)
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let t = match tensor.rank() {
            3 => tensor.unsqueeze(0)?,
            4 => tensor.clone(),
            r => return Err(shape_err!("expected a rank 3 or 4 tensor, got rank {r}")),
        };
        if t.dim(0)? != 1 {
            return Err(shape_err!("expected a single-item batch, got {}", t.dim(0)?));
        }
        Ok(Self::unstack(&t)?.remove(0))
    }
}
