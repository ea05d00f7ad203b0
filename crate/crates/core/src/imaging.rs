//! Images in `[-1, 1]`, PNG conversion, and area downsampling.

use std::path::Path;

use crate::error::{AtlasError, Result};
use crate::tensor::Tensor;

/// A `channels × height × width` image with values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(AtlasError::Shape {
                expected: "[C, H, W]".into(),
                actual: format!("{:?}", tensor.shape()),
            });
        }
        if !tensor.is_finite() {
            return Err(AtlasError::Numeric("image contains non-finite values".into()));
        }
        Ok(Self { tensor })
    }

    pub fn filled(channels: usize, size: usize, value: f64) -> Self {
        Self {
            tensor: Tensor::full(&[channels, size, size], value),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    /// A `[1, C, H, W]` batch of one.
    pub fn as_batch(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.tensor.shape());
        Tensor::from_parts(shape, self.tensor.data().to_vec())
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.tensor.shape() != other.tensor.shape() {
            return Err(AtlasError::Shape {
                expected: format!("{:?}", self.tensor.shape()),
                actual: format!("{:?}", other.tensor.shape()),
            });
        }
        Ok(())
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data().len() as f64)
    }

    /// Area-average downsampling to `size × size`; `size` must divide the side.
    pub fn area_downsample(&self, size: usize) -> Result<Image> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if size == 0 || h % size != 0 || w % size != 0 || h != w {
            return Err(AtlasError::Input(format!(
                "cannot area-downsample {h}x{w} to {size}x{size}"
            )));
        }
        if size == h {
            return Ok(self.clone());
        }
        let f = h / size;
        let norm = 1.0 / (f * f) as f64;
        let src = self.data();
        let mut out = vec![0.0; c * size * size];
        for ch in 0..c {
            for i in 0..size {
                for j in 0..size {
                    let mut s = 0.0;
                    for di in 0..f {
                        for dj in 0..f {
                            s += src[(ch * h + i * f + di) * w + j * f + dj];
                        }
                    }
                    out[(ch * size + i) * size + j] = s * norm;
                }
            }
        }
        Ok(Image {
            tensor: Tensor::from_parts(vec![c, size, size], out),
        })
    }

    /// 8-bit RGB bytes via the affine map `[-1, 1] → [0, 255]`, round-half-even.
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels() != 3 {
            return Err(AtlasError::Input("PNG export needs 3 channels".into()));
        }
        let (h, w) = (self.height(), self.width());
        let d = self.data();
        let mut bytes = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    bytes.push(to_u8(d[(c * h + y) * w + x]));
                }
            }
        }
        Ok(bytes)
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != 3 * width * height {
            return Err(AtlasError::Input("RGB buffer size mismatch".into()));
        }
        let mut data = vec![0.0; 3 * width * height];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data[(c * height + y) * width + x] =
                        bytes[(y * width + x) * 3 + c] as f64 / 255.0 * 2.0 - 1.0;
                }
            }
        }
        Image::new(Tensor::from_parts(vec![3, height, width], data))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8()?;
        let buf = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes)
            .ok_or_else(|| AtlasError::Input("RGB buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => AtlasError::io(path, io),
                other => AtlasError::Image(other),
            })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => AtlasError::io(path, io),
            other => AtlasError::Image(other),
        })?;
        let rgb = img.to_rgb8();
        Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }
}

fn to_u8(v: f64) -> u8 {
    let scaled = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round_ties_even();
    scaled as u8
}
