use std::path::Path;

use image::imageops::FilterType;

use crate::{Error, Result};

/// Single-view image, `channels × height × width`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl RawImage {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} values", pixels.len()),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Image("non-finite pixel".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Loads an 8-bit PNG as single-channel luma scaled to `[0, 1]`,
    /// resized to `size × size` when needed.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_luma8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
        } else {
            img
        };
        let pixels = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        Self::new(1, size, size, pixels)
    }

    /// Bilinear resize of every channel to `size × size`.
    pub fn resized(&self, size: usize) -> Result<Self> {
        if self.height == size && self.width == size {
            return Ok(self.clone());
        }
        let plane = self.height * self.width;
        let mut pixels = Vec::with_capacity(self.channels * size * size);
        for c in 0..self.channels {
            let buf = image::ImageBuffer::<image::Luma<f32>, _>::from_raw(
                self.width as u32,
                self.height as u32,
                self.pixels[c * plane..(c + 1) * plane].to_vec(),
            )
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
            let out = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
            pixels.extend(out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Self::new(self.channels, size, size, pixels)
    }

    /// Writes the first channel as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let plane = &self.pixels[..self.height * self.width];
        let bytes: Vec<u8> = plane
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Average-pools by `factor` and upsamples back with nearest neighbour.
pub fn degrade_image(img: &RawImage, factor: usize) -> Result<RawImage> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::invalid(format!(
            "degradation factor {factor} does not divide {}x{}",
            img.height, img.width
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    let area = (factor * factor) as f32;
    for c in 0..img.channels {
        for by in (0..img.height).step_by(factor) {
            for bx in (0..img.width).step_by(factor) {
                let mut sum = 0.0f32;
                for y in by..by + factor {
                    for x in bx..bx + factor {
                        sum += img.at(c, y, x);
                    }
                }
                let mean = sum / area;
                for y in by..by + factor {
                    for x in bx..bx + factor {
                        *out.at_mut(c, y, x) = mean;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resize_keeps_constants() {
        let img = RawImage::filled(1, 8, 8, 0.25);
        let out = img.resized(4).unwrap();
        assert_eq!((out.height, out.width), (4, 4));
        assert!(out.pixels.iter().all(|&p| (p - 0.25).abs() < 1e-6));
        assert_eq!(img.resized(8).unwrap(), img);
    }

    #[test]
    fn factor_one_is_identity() {
        let img = RawImage::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(degrade_image(&img, 1).unwrap(), img);
    }

    #[test]
    fn constant_image_is_invariant() {
        let img = RawImage::filled(1, 8, 8, 0.37);
        assert_eq!(degrade_image(&img, 2).unwrap(), img);
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let pixels = (0..16)
            .map(|i| ((i / 4 + i % 4) % 2) as f32)
            .collect::<Vec<_>>();
        let img = RawImage::new(1, 4, 4, pixels).unwrap();
        let out = degrade_image(&img, 2).unwrap();
        assert!(out.pixels.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn non_divisor_rejected() {
        let img = RawImage::filled(1, 6, 6, 0.0);
        assert!(degrade_image(&img, 4).is_err());
        assert!(degrade_image(&img, 0).is_err());
    }

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = RawImage::new(1, 2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        img.save_png(&path).unwrap();
        let back = RawImage::load(&path, 2).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let resized = RawImage::load(&path, 4).unwrap();
        assert_eq!(resized.pixels.len(), 16);
    }

    proptest! {
        #[test]
        fn degradation_is_idempotent(vals in proptest::collection::vec(0.0f32..1.0, 64), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let img = RawImage::new(1, 8, 8, vals).unwrap();
            let once = degrade_image(&img, f).unwrap();
            let twice = degrade_image(&once, f).unwrap();
            for (a, b) in once.pixels.iter().zip(&twice.pixels) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
