//! Floating-point images (row-major HWC) and PNG I/O.

use std::path::Path;

use cgs_autodiff::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let data = (0..width * height).flat_map(|_| value.iter().copied()).collect();
        Self { width, height, channels: value.len(), data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, c] => Self::new(w, h, c, t.data().to_vec()),
            s => Err(Error::Shape(format!("expected an HxWxC tensor, got {s:?}"))),
        }
    }

    /// Writes an RGB or RGBA PNG, clamping to `[0, 1]` and rounding to 8 bits.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::InvalidInput(format!("cannot write a {c}-channel PNG"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    /// Loads a PNG keeping all of its channels (8- or 16-bit).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (channels, data): (usize, Vec<f64>) = match img.color().channel_count() {
            4 | 2 => (4, img.to_rgba32f().into_raw().into_iter().map(f64::from).collect()),
            _ => (3, img.to_rgb32f().into_raw().into_iter().map(f64::from).collect()),
        };
        Self::new(img.width() as usize, img.height() as usize, channels, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i * 10) as f64 / 255.0).collect();
        let img = Image::new(2, 3, 4, data).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.channels, 4);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::filled(3, 2, &[0.1, 0.2, 0.3]);
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
        assert_eq!(img.pixel(2, 1), &[0.1, 0.2, 0.3]);
    }
}
