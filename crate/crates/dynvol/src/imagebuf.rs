//! Planar RGB image buffer used throughout the pipeline. Channel values live in
//! [0, 1] as f32; conversion to and from 8-bit PNG quantizes with
//! round-to-nearest, so a save/load round trip moves a channel by at most
//! half a quantization step (1/510).

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB image, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// len == width * height * 3, index = (row * width + col) * 3 + channel.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; (width as usize) * (height as usize) * 3],
        }
    }

    #[inline]
    pub fn idx(&self, row: u32, col: u32) -> usize {
        debug_assert!(row < self.height && col < self.width);
        ((row * self.width + col) * 3) as usize
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> [f32; 3] {
        let i = self.idx(row, col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, rgb: [f32; 3]) {
        let i = self.idx(row, col);
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn pixel_count(&self) -> usize {
        (self.width as usize) * (self.height as usize)
    }

    /// Uncompressed RGB8 footprint; the honest size of what the PNG encodes.
    pub fn raw_rgb_bytes(&self) -> usize {
        self.pixel_count() * 3
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width, self.height, |x, y| {
            let p = self.get(y, x);
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (width, height) = img.dimensions();
        let mut out = Image::new(width, height);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(y, x, p.0.map(|v| v as f32 / 255.0));
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .decode()?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Mean squared error against another image of identical dimensions,
    /// averaged over all pixels and channels, computed in f64.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mse requires matching dimensions"
        );
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rgb8_round_trip_stays_within_quantization_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut img = Image::new(9, 5);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let back = Image::from_rgb8(&img.to_rgb8());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn mse_of_identical_images_is_zero() {
        let mut img = Image::new(4, 4);
        img.set(2, 1, [0.25, 0.5, 0.75]);
        assert_eq!(img.mse(&img.clone()), 0.0);
    }
}
