//! RGB images stored channel-major with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `[3, height, width]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            img.channel_mut(c).fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Rounds every value to the nearest 8-bit level, as PNG storage would.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dynamic = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = dynamic.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Self::new(h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                let sy = y * self.height / height;
                for x in 0..width {
                    let sx = x * self.width / width;
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

/// Stacks images into a `[batch, 3, h, w]` buffer, mapping `[0, 1]` to `[-1, 1]`.
pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Vec<T> {
    let mut out = Vec::with_capacity(images.iter().map(|i| i.data.len()).sum());
    for img in images {
        out.extend(img.data.iter().map(|&v| T::of((v as f64 - 0.5) / 0.5)));
    }
    out
}

/// Writes a single-channel map in `[0, 1]` as an 8-bit grayscale PNG,
/// upscaling each cell to `scale x scale` pixels.
pub fn save_gray_png(map: &[f64], rows: usize, cols: usize, scale: usize, path: &Path) -> Result<()> {
    let scale = scale.max(1);
    let mut buf = image::GrayImage::new((cols * scale) as u32, (rows * scale) as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = map[(y as usize / scale) * cols + x as usize / scale];
        px[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.123).fract();
        }
        img.quantize();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut img = Image::new(2, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        assert_eq!(img.flipped_horizontal().flipped_horizontal(), img);
        assert_ne!(img.flipped_horizontal(), img);
    }
}
