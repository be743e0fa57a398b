//! RGB images and the strided image encoder.

mod encoder;

pub use encoder::{encode_image, encode_on_tape, register_image_encoder, ImageEncoderConfig, ImageFeatures};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height × width × 3` RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("image dimensions"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::dim("Image::new", &[height, width, 3], &[pixels.len()]));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image channels must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(width, height, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Center crop so both sides are multiples of `k`.
    pub fn center_crop_to_multiple(&self, k: usize) -> Result<Self> {
        let (w, h) = (self.width / k * k, self.height / k * k);
        if w == 0 || h == 0 {
            return Err(Error::contract(format!(
                "image {}x{} is smaller than {k} pixels",
                self.width, self.height
            )));
        }
        let (x0, y0) = ((self.width - w) / 2, (self.height - h) / 2);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_to_multiple_of_eight() {
        let img = Image::filled(21, 10, [0.2, 0.4, 0.6]);
        let c = img.center_crop_to_multiple(8).unwrap();
        assert_eq!((c.width(), c.height()), (16, 8));
        assert!(Image::filled(5, 5, [0.0; 3]).center_crop_to_multiple(8).is_err());
    }

    #[test]
    fn rejects_out_of_range_channels() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
    }
}
