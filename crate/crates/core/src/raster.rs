//! Floating-point images and their on-disk formats.
//!
//! Raw files are little-endian: `u32 width, u32 height, u32 channels`, then
//! `f32` samples in planar (channel-major) order.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image buffer size mismatch");
        Image { width, height, channels, data }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image::new(width, height, channels, vec![value; width * height * channels])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    /// Planar copy of channel `c`.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Writes an 8-bit PNG, clamping samples to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            n => return Err(Error::Argument(format!("cannot write {n}-channel PNG"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Image::new(w as usize, h as usize, 3, data))
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in 0..self.channels {
            for v in self.channel(c) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Image> {
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or(Error::Decode { offset: 4 * i, message: "truncated raw image header".into() })
        };
        let (w, h, ch) = (word(0)?, word(1)?, word(2)?);
        let n = w * h * ch;
        if bytes.len() != 12 + 4 * n {
            return Err(Error::Decode {
                offset: bytes.len(),
                message: format!("raw image {w}x{h}x{ch} needs {} bytes", 12 + 4 * n),
            });
        }
        let mut data = vec![0.0; n];
        let plane = w * h;
        for (k, chunk) in bytes[12..].chunks_exact(4).enumerate() {
            let (c, p) = (k / plane, k % plane);
            data[p * ch + c] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        Ok(Image::new(w, h, ch, data))
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raw_bytes())?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Image> {
        Image::from_raw_bytes(&std::fs::read(path)?)
    }

    /// Loads `.png` or raw files by extension.
    pub fn load(path: &Path) -> Result<Image> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Image::load_png(path),
            _ => Image::load_raw(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_planar() {
        let img = Image::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let bytes = img.to_raw_bytes();
        assert_eq!(bytes.len(), 12 + 24);
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let second = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        assert_eq!((first, second), (0.1f32, 0.4f32));
        let back = Image::from_raw_bytes(&bytes).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(Image::from_raw_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::new(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect());
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
