//! Raster containers shared across modules: binary masks and RGB images with
//! a magnification tag.

use image::{GrayImage, Luma, RgbImage};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("zero-sized raster")]
    ZeroSize,
    #[error("non-positive magnification {0}")]
    NonPositiveMagnification(f64),
}

/// Row-major binary mask; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskBitmap {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl MaskBitmap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c) as u8);
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    /// Builds from arbitrary bytes; nonzero is foreground.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self, RasterError> {
        if bytes.len() != height * width {
            return Err(RasterError::DimensionMismatch(
                height,
                width,
                bytes.len(),
                1,
            ));
        }
        Ok(Self {
            height,
            width,
            bits: bytes.iter().map(|&b| (b != 0) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value as u8;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn ensure_same_dims(&self, other: &MaskBitmap) -> Result<(), RasterError> {
        if self.dims() != other.dims() {
            return Err(RasterError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    /// Nearest-neighbour resample with pixel-centre alignment.
    ///
    /// Integer upscaling factors replicate each source pixel exactly.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self, RasterError> {
        if height == 0 || width == 0 || self.is_empty() {
            return Err(RasterError::ZeroSize);
        }
        let rows: Vec<usize> = (0..height)
            .map(|r| nearest_source(r, height, self.height))
            .collect();
        let cols: Vec<usize> = (0..width)
            .map(|c| nearest_source(c, width, self.width))
            .collect();
        Ok(Self::from_fn(height, width, |r, c| self.get(rows[r], cols[c])))
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Self {
        assert!(row + height <= self.height && col + width <= self.width);
        Self::from_fn(height, width, |r, c| self.get(row + r, col + c))
    }

    /// Rotates 90 degrees clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(w, h, |r, c| self.get(h - 1 - c, r))
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(h, w, |r, c| self.get(r, w - 1 - c))
    }

    pub fn union(&self, other: &MaskBitmap) -> Result<Self, RasterError> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a | b)
                .collect(),
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_gray_image(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |r, c| {
            img.get_pixel(c as u32, r as u32).0[0] != 0
        })
    }
}

pub(crate) fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    pos.min(src_len - 1)
}

/// An RGB raster tagged with its optical magnification (e.g. 40 for 40x).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pixels: RgbImage,
    magnification: f64,
}

impl RasterImage {
    pub fn new(pixels: RgbImage, magnification: f64) -> Result<Self, RasterError> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(RasterError::ZeroSize);
        }
        if !(magnification > 0.0 && magnification.is_finite()) {
            return Err(RasterError::NonPositiveMagnification(magnification));
        }
        Ok(Self {
            pixels,
            magnification,
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    pub fn magnification(&self) -> f64 {
        self.magnification
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_upscale_replicates_pixels() {
        let m = MaskBitmap::from_fn(3, 4, |r, c| (r + c) % 2 == 0);
        let up = m.resize_nearest(6, 12).unwrap();
        for r in 0..6 {
            for c in 0..12 {
                assert_eq!(up.get(r, c), m.get(r / 2, c / 3));
            }
        }
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let m = MaskBitmap::from_fn(5, 7, |r, c| r * c % 3 == 1);
        assert_eq!(m.rotate90().rotate90().rotate90().rotate90(), m);
        assert_eq!(m.rotate90().dims(), (7, 5));
    }

    #[test]
    fn gray_roundtrip_thresholds_nonzero() {
        let mut img = GrayImage::new(3, 2);
        img.put_pixel(1, 0, Luma([7]));
        let m = MaskBitmap::from_gray_image(&img);
        assert_eq!(m.count(), 1);
        assert!(m.get(0, 1));
        assert_eq!(MaskBitmap::from_gray_image(&m.to_gray_image()), m);
    }

    #[test]
    fn rejects_bad_magnification() {
        let img = RgbImage::new(2, 2);
        assert!(matches!(
            RasterImage::new(img, 0.0),
            Err(RasterError::NonPositiveMagnification(_))
        ));
    }
}
