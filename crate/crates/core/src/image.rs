//! Plain image, mask, and rectangle types shared by every module.
//!
//! Images are stored row-major with interleaved RGB channels (`H×W×3`) and
//! values in `[0, 1]`. Tensor conversions use the `(1, 3, H, W)` layout that
//! the networks and losses operate on.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::RejectedInput("image contains non-finite pixel values".into()))
        }
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|v| v / n)
    }

    /// Zero-fills every pixel where `mask` is 0.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Image> {
        mask.ensure_matches(self.height, self.width)?;
        let mut out = self.clone();
        for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
            if mask.values[i] == 0 {
                px.fill(0.0);
            }
        }
        Ok(out)
    }

    pub fn crop(&self, rect: Rect) -> Result<Image> {
        if !rect.fits(self.height, self.width) {
            return Err(Error::shape(format!(
                "rect {rect:?} does not fit inside a {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(rect.size, rect.size, |y, x| self.pixel(rect.top + y, rect.left + x)))
    }

    /// `(1, 3, H, W)` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Accepts `(1, 3, H, W)` or `(3, H, W)` tensors of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape(format!("expected a rank-3 or rank-4 image tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::new(h, w, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Image {
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Triangle-filter resize, used when loading inputs at the working resolution.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length matches dimensions");
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        Image {
            height,
            width,
            data: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Square pixel rectangle `[top, top+size) × [left, left+size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, size: usize) -> Self {
        Self { top, left, size }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.size > 0 && self.top + self.size <= height && self.left + self.size <= width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.size && x >= self.left && x < self.left + self.size
    }

    pub fn area(&self) -> usize {
        self.size * self.size
    }

    /// Square of side `size` centred on `(cy, cx)`, shifted to lie inside the image.
    pub fn centered_clamped(cy: usize, cx: usize, size: usize, height: usize, width: usize) -> Result<Self> {
        if size > height || size > width || size == 0 {
            return Err(Error::shape(format!(
                "patch of size {size} cannot fit inside a {height}x{width} image"
            )));
        }
        let top = cy.saturating_sub(size / 2).min(height - size);
        let left = cx.saturating_sub(size / 2).min(width - size);
        Ok(Self { top, left, size })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x) as u8);
            }
        }
        Self { height, width, values }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::RejectedInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn fill_rect(&mut self, rect: Rect) {
        for y in rect.top..(rect.top + rect.size).min(self.height) {
            for x in rect.left..(rect.left + rect.size).min(self.width) {
                self.values[y * self.width + x] = 1;
            }
        }
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        other.ensure_matches(self.height, self.width)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a & b).collect(),
        })
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        other.ensure_matches(self.height, self.width)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a | b).collect(),
        })
    }

    /// True when every pixel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.values.iter().zip(&other.values).all(|(a, b)| a <= b)
    }

    pub(crate) fn ensure_matches(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::shape(format!(
                "mask is {}x{} but image is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `(1, 1, H, W)` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.values, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?;
        Ok(t)
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.values.iter().map(|&v| v * 255).collect();
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// 8-bit PNG with 0 for background and 255 for foreground.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads any image and thresholds its luma at 128.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let gray = image::open(path.as_ref())?.to_luma8();
        let values = gray.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
        Ok(Self {
            height: gray.height() as usize,
            width: gray.width() as usize,
            values,
        })
    }

    pub fn resized_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }
}
