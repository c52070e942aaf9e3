//! Plain height × width × channel arrays used as the pixel-space and latent-space
//! currency, plus conversion to and from batched NCHW candle tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{bail_validation, Result};

/// A dense H×W×C array stored interleaved (channel fastest), f32.
#[derive(Clone, Debug, PartialEq)]
pub struct HwcTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Pixel-space image with intensities in [0,1].
pub type ImageTensor = HwcTensor;
/// Latent-space array z (h×w×c_z).
pub type LatentTensor = HwcTensor;

impl HwcTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            bail_validation!("empty tensor {height}x{width}x{channels}");
        }
        if data.len() != height * width * channels {
            bail_validation!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a row-major H×W plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        if planes.iter().any(|p| p.len() != height * width) {
            bail_validation!("plane size mismatch for {height}x{width}");
        }
        Ok(Self::from_fn(height, width, channels, |y, x, c| {
            planes[c][y * width + x]
        }))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Rounds every value to the nearest 8-bit level (the PNG interchange grid).
    pub fn quantize_u8(mut self) -> Self {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            bail_validation!("shape mismatch: {:?} vs {:?}", self.shape(), other.shape());
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            bail_validation!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height,
                self.width
            );
        }
        Ok(Self::from_fn(height, width, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch of equally shaped tensors → (N, C, H, W).
    pub fn stack_nchw(items: &[&HwcTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let Some(first) = items.first() else {
            bail_validation!("cannot stack an empty batch");
        };
        let (h, w, c) = first.shape();
        let mut buf: Vec<f32> = Vec::with_capacity(items.len() * h * w * c);
        for item in items {
            if item.shape() != (h, w, c) {
                bail_validation!("batch shape mismatch: {:?} vs {:?}", item.shape(), (h, w, c));
            }
            for ch in 0..c {
                buf.extend(item.data.iter().skip(ch).step_by(c));
            }
        }
        Ok(Tensor::from_vec(buf, (items.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn to_nchw(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::stack_nchw(&[self], dtype, device)
    }

    /// (N, C, H, W) → N tensors.
    pub fn unstack_nchw(t: &Tensor) -> Result<Vec<HwcTensor>> {
        let (n, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let per = c * h * w;
        Ok((0..n)
            .map(|i| {
                let item = &flat[i * per..(i + 1) * per];
                HwcTensor::from_fn(h, w, c, |y, x, ch| item[ch * h * w + y * w + x])
            })
            .collect())
    }
}
