//! In-memory RGB images and binary masks, plus PNG/JPEG I/O.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, GrayImage, ImageFormat, RgbImage};
use vlmdiff_nn::Tensor;

use crate::error::{Error, Result};

/// `height × width × 3` values in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantizes to 8 bits the same way the PNG writer does.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| to_u8(v) as f32 / 255.0)
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, ImageFormat::Png)
            .expect("png encoding to memory");
        out.into_inner()
    }

    /// Loads an image file and resizes it to `(height, width)` if needed.
    pub fn load(path: &Path, resolution: (usize, usize)) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut rgb = img.to_rgb8();
        let (h, w) = resolution;
        if rgb.height() as usize != h || rgb.width() as usize != w {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
        Ok(Self::from_rgb8(&rgb))
    }

    /// NCHW tensor `[1, 3, h, w]` with values rescaled to `[-1, 1]`.
    pub fn to_model_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c] * 2.0 - 1.0;
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], out).expect("image tensor")
    }

    /// Inverse of [`Image::to_model_tensor`] for sample `i`, clamped to `[0, 1]`.
    pub fn from_model_tensor(t: &Tensor, i: usize) -> Self {
        let (_, c, h, w) = t.nchw();
        assert_eq!(c, 3, "expected an RGB tensor");
        let hw = h * w;
        let src = &t.data()[i * 3 * hw..(i + 1) * 3 * hw];
        let mut data = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                data[p * 3 + ch] = ((src[ch * hw + p] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        }
    }
}

/// Stacks images into a model-space NCHW batch.
pub fn to_model_batch(images: &[&Image]) -> Tensor {
    let parts: Vec<Tensor> = images.iter().map(|im| im.to_model_tensor()).collect();
    Tensor::stack_batch(&parts).expect("uniform image sizes")
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary `height × width` mask; 1 marks anomalous pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Loads an 8-bit mask; any nonzero pixel is anomalous.
    pub fn load(path: &Path, resolution: (usize, usize)) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut g = img.to_luma8();
        let (h, w) = resolution;
        if g.height() as usize != h || g.width() as usize != w {
            g = image::imageops::resize(&g, w as u32, h as u32, FilterType::Nearest);
        }
        Ok(Self {
            height: h,
            width: w,
            data: g.as_raw().iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let g = GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
        )
        .expect("mask buffer");
        let mut out = Cursor::new(Vec::new());
        g.write_to(&mut out, ImageFormat::Png).expect("png encoding");
        out.into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_tensor_roundtrip() {
        let mut im = Image::filled(4, 5, [0.0, 0.5, 1.0]);
        im.set(1, 2, [0.25, 0.75, 0.1]);
        let back = Image::from_model_tensor(&im.to_model_tensor(), 0);
        assert!(im.mean_abs_diff(&back) < 1e-6);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let im = Image::filled(2, 2, [0.3; 3]);
        assert!(im.psnr(&im).is_infinite());
        let other = Image::filled(2, 2, [0.4; 3]);
        assert!((im.psnr(&other) - 20.0).abs() < 1e-4);
    }
}
