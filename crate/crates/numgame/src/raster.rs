//! Grayscale square canvases shared by dot stimuli and rendered sketches.
//!
//! Convention: `0.0` is black ink, `1.0` is white paper. Values in between
//! only appear in differentiable sketch renderings; hard stimulus rasters
//! are exactly 0 or 1.

use std::path::Path;

use crate::stimuli::StimulusError;

/// Square grayscale image, row-major `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    side: usize,
    data: Vec<f32>,
}

impl Raster {
    /// All-white canvas.
    pub fn white(side: usize) -> Self {
        Self { side, data: vec![1.0; side * side] }
    }

    pub fn from_data(side: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), side * side, "raster data must be side^2");
        Self { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.side + x] = v;
    }

    /// Fraction of pixels darker than `threshold`.
    pub fn dark_fraction(&self, threshold: f32) -> f64 {
        let dark = self.data.iter().filter(|&&v| v < threshold).count();
        dark as f64 / self.data.len() as f64
    }

    /// Block-mean downsample to `target` x `target`; `side` must be a
    /// multiple of `target`.
    pub fn downsample_mean(&self, target: usize) -> Raster {
        assert!(target > 0 && self.side % target == 0, "side {} not divisible by {target}", self.side);
        let block = self.side / target;
        let norm = 1.0 / (block * block) as f32;
        let mut out = vec![0.0f32; target * target];
        for ty in 0..target {
            for tx in 0..target {
                let mut acc = 0.0f32;
                for dy in 0..block {
                    let row = (ty * block + dy) * self.side + tx * block;
                    for dx in 0..block {
                        acc += self.data[row + dx];
                    }
                }
                out[ty * target + tx] = acc * norm;
            }
        }
        Raster { side: target, data: out }
    }

    /// Write as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), StimulusError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.side as u32, self.side as u32, bytes)
            .expect("buffer size matches dimensions");
        img.save(path).map_err(|e| StimulusError::Encoding(e.to_string()))
    }

    /// Read back a PNG written by [`Raster::save_png`].
    pub fn load_png(path: &Path) -> Result<Self, StimulusError> {
        let img = image::open(path).map_err(|e| StimulusError::Encoding(e.to_string()))?;
        let gray = img.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        if w != h {
            return Err(StimulusError::Encoding(format!("expected square image, got {w}x{h}")));
        }
        let data: Vec<f32> = gray.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Self { side: w, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dark_fraction_counts_pixels() {
        let mut r = Raster::white(4);
        r.set(0, 0, 0.0);
        r.set(3, 3, 0.0);
        assert_eq!(r.dark_fraction(0.5), 2.0 / 16.0);
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut r = Raster::white(4);
        // Blacken the top-left 2x2 block entirely.
        for y in 0..2 {
            for x in 0..2 {
                r.set(x, y, 0.0);
            }
        }
        let d = r.downsample_mean(2);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 0), 1.0);
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(1, 1), 1.0);
    }

    #[test]
    fn png_roundtrip_is_exact_for_binary_images() {
        let dir = std::env::temp_dir().join("numgame-raster-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.png");
        let mut r = Raster::white(8);
        r.set(2, 5, 0.0);
        r.set(7, 0, 0.0);
        r.save_png(&path).unwrap();
        let back = Raster::load_png(&path).unwrap();
        assert_eq!(r, back);
    }
}
