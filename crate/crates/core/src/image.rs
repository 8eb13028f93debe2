//! Real-valued RGB images and 8-bit PNG IO.

use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::nn::{Scalar, Tensor};

/// `H×W×3` image with interleaved channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn clamped(mut self) -> Self {
        self.clamp01();
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// ITU-R BT.601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Quantize to 8 bits with round-half-up, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(w as usize, h as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Dimension("image buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// `[1, 3, H, W]` network tensor.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let hw = self.width * self.height;
        let mut out = vec![S::zero(); 3 * hw];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = S::lit(p[c] as f64);
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], out)
    }

    /// Inverse of [`Image::to_tensor`] for item `index` of a `[N, 3, H, W]` batch.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || index >= s[0] {
            return Err(Error::Dimension(format!("expected [N,3,H,W] tensor, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let hw = h * w;
        let src = &t.data()[index * 3 * hw..(index + 1) * 3 * hw];
        let mut data = vec![0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = src[c * hw + i].as_f64() as f32;
            }
        }
        Self::new(w, h, data)
    }
}

/// Stack images of identical size into a `[N, 3, H, W]` tensor.
pub fn batch_tensor<S: Scalar>(images: &[&Image]) -> Result<Tensor<S>> {
    let Some(first) = images.first() else {
        return Err(Error::Data("empty image batch".into()));
    };
    if images.iter().any(|im| im.dims() != first.dims()) {
        return Err(Error::Dimension("images in a batch must share dimensions".into()));
    }
    let parts: Vec<Tensor<S>> = images.iter().map(|im| im.to_tensor()).collect();
    Ok(Tensor::stack(&parts))
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}
