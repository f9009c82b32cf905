//! Multi-level RGB slide pyramids, their region annotations, a seeded
//! synthetic slide generator, and the on-disk directory format.
//!
//! A pyramid always holds exactly three levels (25x, 100x, 400x) whose
//! dimensions differ by a factor of 4. Coarse levels produced by
//! [`PyramidImage::from_base`] are exact box-filter means of the 400x level,
//! rounded half-up to 8 bits.

mod io;
mod region;
mod synthetic;

pub use io::{
    load_annotations, load_pyramid, read_raster, save_annotations, save_pyramid, write_raster,
};
pub use region::{point_in_region, RegionAnnotation};
pub use synthetic::{generate_synthetic, ClassTexture, Stripe, SyntheticSpec};

use crate::class::Magnification;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Level {
    pub magnification: Magnification,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, 3 bytes per pixel.
    pub pixels: Vec<u8>,
}

impl Level {
    pub fn new(
        magnification: Magnification,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{magnification} level {width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Level {
            magnification,
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Box-filter downsample by `factor` with round-half-up quantization.
    pub fn box_downsample(&self, factor: u32, magnification: Magnification) -> Result<Level> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor)
        {
            return Err(Error::LevelRatio(format!(
                "{}x{} is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let area = factor * factor;
        let src_w = self.width as usize;
        let mut out = vec![0u8; w as usize * h as usize * 3];
        let mut sums = vec![0u32; w as usize * 3];
        for oy in 0..h as usize {
            sums.iter_mut().for_each(|s| *s = 0);
            for sy in oy * factor as usize..(oy + 1) * factor as usize {
                let row = &self.pixels[sy * src_w * 3..(sy + 1) * src_w * 3];
                for (sx, px) in row.chunks_exact(3).enumerate() {
                    let o = (sx / factor as usize) * 3;
                    sums[o] += px[0] as u32;
                    sums[o + 1] += px[1] as u32;
                    sums[o + 2] += px[2] as u32;
                }
            }
            let dst = &mut out[oy * w as usize * 3..(oy + 1) * w as usize * 3];
            for (d, &s) in dst.iter_mut().zip(&sums) {
                // floor(s / area + 1/2), exact in integers
                *d = ((2 * s + area) / (2 * area)) as u8;
            }
        }
        Level::new(magnification, w, h, out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidImage {
    pub slide_id: String,
    pub patient_id: String,
    /// Coarse to fine: 25x, 100x, 400x.
    levels: Vec<Level>,
}

impl PyramidImage {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        levels: Vec<Level>,
    ) -> Result<Self> {
        if levels.len() != 3 {
            return Err(Error::LevelRatio(format!(
                "expected 3 levels, got {}",
                levels.len()
            )));
        }
        for (level, mag) in levels.iter().zip(Magnification::ALL) {
            if level.magnification != mag {
                return Err(Error::LevelRatio(format!(
                    "levels must be ordered 25x,100x,400x; found {} where {mag} expected",
                    level.magnification
                )));
            }
        }
        let base = &levels[2];
        for level in &levels[..2] {
            let f = level.magnification.factor();
            if level.width * f != base.width || level.height * f != base.height {
                return Err(Error::LevelRatio(format!(
                    "{} level is {}x{}, base is {}x{} (factor {f} required)",
                    level.magnification, level.width, level.height, base.width, base.height
                )));
            }
        }
        Ok(PyramidImage {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            levels,
        })
    }

    /// Builds the 100x and 25x levels as exact 4x4 and 16x16 box means of `base`.
    pub fn from_base(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        base: Level,
    ) -> Result<Self> {
        if base.magnification != Magnification::X400 {
            return Err(Error::LevelRatio("base level must be 400x".into()));
        }
        let l100 = base.box_downsample(4, Magnification::X100)?;
        let l25 = base.box_downsample(16, Magnification::X25)?;
        PyramidImage::new(slide_id, patient_id, vec![l25, l100, base])
    }

    pub fn level(&self, m: Magnification) -> &Level {
        &self.levels[m.code() as usize]
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn base(&self) -> &Level {
        &self.levels[2]
    }

    pub fn base_dims(&self) -> (u32, u32) {
        (self.base().width, self.base().height)
    }
}
