//! Co-centered multiscale tile extraction.
//!
//! A base-level (400x) point `c` maps to `floor(c / r)` on a level with
//! factor `r`. Each tile covers `[m - 64, m + 64)` around the mapped point
//! `m`, so tile pixel (64, 64) is the center at every scale. Window parts
//! outside the level are filled with the plan's pad value.

mod archive;

pub use archive::{read_archive, write_archive, TileArchive};

use serde::{Deserialize, Serialize};

use crate::class::{Magnification, ScaleSet, TissueClass};
use crate::error::{Error, Result};
use crate::pyramid::{point_in_region, PyramidImage, RegionAnnotation};

pub const TILE_SIZE: usize = 128;
pub const TILE_HALF: i64 = 64;
pub const TILE_BYTES: usize = TILE_SIZE * TILE_SIZE * 3;

/// One 128x128 RGB tile, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Tile(Vec<u8>);

impl Tile {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != TILE_BYTES {
            return Err(Error::Shape(format!(
                "tile needs {TILE_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Tile(bytes))
    }

    pub fn filled(value: u8) -> Self {
        Tile(vec![value; TILE_BYTES])
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.0
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * TILE_SIZE + x) * 3;
        [self.0[i], self.0[i + 1], self.0[i + 2]]
    }
}

impl std::fmt::Debug for Tile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tile(128x128x3)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileTriplet {
    pub slide_id: String,
    pub patient_id: String,
    pub label: TissueClass,
    pub center_base: (u32, u32),
    /// Indexed by [`Magnification::code`].
    pub tiles: [Option<Tile>; 3],
}

impl TileTriplet {
    pub fn tile(&self, m: Magnification) -> Option<&Tile> {
        self.tiles[m.code() as usize].as_ref()
    }

    pub fn scales_present(&self) -> ScaleSet {
        Magnification::ALL
            .into_iter()
            .filter(|m| self.tile(*m).is_some())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPlan {
    pub stride: u32,
    pub scales: ScaleSet,
    pub pad_value: u8,
}

impl Default for ExtractionPlan {
    fn default() -> Self {
        ExtractionPlan {
            stride: 128,
            scales: ScaleSet::ALL,
            pad_value: 255,
        }
    }
}

impl ExtractionPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::usage("stride", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn map_center(center_base: (u32, u32), target: Magnification) -> (u32, u32) {
    let r = target.factor();
    (center_base.0 / r, center_base.1 / r)
}

/// Crops the 128x128 window around `center` (level coordinates) from one level.
pub fn crop_level(
    pyramid: &PyramidImage,
    m: Magnification,
    center: (u32, u32),
    pad_value: u8,
) -> Tile {
    let level = pyramid.level(m);
    let (w, h) = (level.width as i64, level.height as i64);
    let (x0, y0) = (center.0 as i64 - TILE_HALF, center.1 as i64 - TILE_HALF);
    let mut tile = Tile::filled(pad_value);
    let row_bytes = TILE_SIZE * 3;
    // horizontal span of the window that lies inside the level
    let sx0 = x0.max(0);
    let sx1 = (x0 + TILE_SIZE as i64).min(w);
    if sx0 >= sx1 {
        return tile;
    }
    let len = (sx1 - sx0) as usize * 3;
    let dst_off = (sx0 - x0) as usize * 3;
    for ty in 0..TILE_SIZE {
        let sy = y0 + ty as i64;
        if sy < 0 || sy >= h {
            continue;
        }
        let src = (sy as usize * w as usize + sx0 as usize) * 3;
        let dst = ty * row_bytes + dst_off;
        tile.0[dst..dst + len].copy_from_slice(&level.pixels[src..src + len]);
    }
    tile
}

pub fn extract_triplet(
    pyramid: &PyramidImage,
    center_base: (u32, u32),
    label: TissueClass,
    scales: ScaleSet,
    pad_value: u8,
) -> Result<TileTriplet> {
    let (w, h) = pyramid.base_dims();
    if center_base.0 >= w || center_base.1 >= h {
        return Err(Error::OutOfBounds {
            x: center_base.0,
            y: center_base.1,
            width: w,
            height: h,
        });
    }
    let mut tiles: [Option<Tile>; 3] = Default::default();
    for m in scales.iter() {
        tiles[m.code() as usize] = Some(crop_level(
            pyramid,
            m,
            map_center(center_base, m),
            pad_value,
        ));
    }
    Ok(TileTriplet {
        slide_id: pyramid.slide_id.clone(),
        patient_id: pyramid.patient_id.clone(),
        label,
        center_base,
        tiles,
    })
}

/// Lattice centers `stride/2 + k*stride` (absolute base coordinates) that lie
/// inside the region's bounding box and polygon, in row-major order.
pub fn plan_centers(region: &RegionAnnotation, plan: &ExtractionPlan) -> Result<Vec<(u32, u32)>> {
    plan.validate()?;
    let s = plan.stride as i64;
    let off = s / 2;
    let (min_x, min_y, max_x, max_y) = region.bounding_box();
    let first = |lo: i64| {
        let k = (lo - off + s - 1).div_euclid(s);
        (k * s + off).max(off)
    };
    let mut out = Vec::new();
    let mut y = first(min_y);
    while y <= max_y {
        let mut x = first(min_x);
        while x <= max_x {
            if point_in_region(region, x, y) {
                out.push((x as u32, y as u32));
            }
            x += s;
        }
        y += s;
    }
    Ok(out)
}

/// Plans and extracts every tile of every region, in region order.
pub fn extract_regions(
    pyramid: &PyramidImage,
    regions: &[RegionAnnotation],
    plan: &ExtractionPlan,
) -> Result<Vec<TileTriplet>> {
    let mut out = Vec::new();
    for region in regions {
        for center in plan_centers(region, plan)? {
            out.push(extract_triplet(
                pyramid,
                center,
                region.label,
                plan.scales,
                plan.pad_value,
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{generate_synthetic, Level, SyntheticSpec};

    fn gradient_pyramid(w: u32, h: u32) -> PyramidImage {
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[
                    (x % 251) as u8,
                    (y % 241) as u8,
                    ((x + 3 * y) % 239) as u8,
                ]);
            }
        }
        PyramidImage::from_base("s", "p", Level::new(Magnification::X400, w, h, px).unwrap())
            .unwrap()
    }

    #[test]
    fn map_center_floors() {
        assert_eq!(map_center((800, 400), Magnification::X100), (200, 100));
        assert_eq!(map_center((800, 400), Magnification::X25), (50, 25));
        assert_eq!(map_center((803, 401), Magnification::X100), (200, 100));
        assert_eq!(map_center((803, 401), Magnification::X400), (803, 401));
    }

    #[test]
    fn interior_center_needs_no_padding() {
        let p = gradient_pyramid(4096, 4096);
        let t = extract_triplet(&p, (2048, 2048), TissueClass::Stroma, ScaleSet::ALL, 7).unwrap();
        assert_eq!(t.scales_present(), ScaleSet::ALL);
        for m in Magnification::ALL {
            let tile = t.tile(m).unwrap();
            assert_eq!(tile.as_bytes().len(), TILE_BYTES);
            let c = map_center((2048, 2048), m);
            assert_eq!(tile.pixel(64, 64), p.level(m).pixel(c.0, c.1));
            assert_eq!(tile.pixel(0, 0), p.level(m).pixel(c.0 - 64, c.1 - 64));
        }
    }

    #[test]
    fn corner_center_is_padded() {
        let p = gradient_pyramid(512, 512);
        let scales: ScaleSet = [Magnification::X400].into_iter().collect();
        let t = extract_triplet(&p, (10, 10), TissueClass::Blood, scales, 255).unwrap();
        let tile = t.tile(Magnification::X400).unwrap();
        assert!(t.tile(Magnification::X100).is_none());
        for y in 0..TILE_SIZE {
            for x in 0..TILE_SIZE {
                let (bx, by) = (x as i64 + 10 - 64, y as i64 + 10 - 64);
                let want = if bx < 0 || by < 0 {
                    [255; 3]
                } else {
                    p.base().pixel(bx as u32, by as u32)
                };
                assert_eq!(tile.pixel(x, y), want);
            }
        }
    }

    #[test]
    fn out_of_bounds_center() {
        let p = gradient_pyramid(64, 64);
        assert!(matches!(
            extract_triplet(&p, (64, 3), TissueClass::Blood, ScaleSet::ALL, 0),
            Err(Error::OutOfBounds { .. })
        ));
    }

    fn brute_force_centers(region: &RegionAnnotation, stride: u32) -> Vec<(u32, u32)> {
        let (min_x, min_y, max_x, max_y) = region.bounding_box();
        let mut out = Vec::new();
        for y in min_y.max(0)..=max_y {
            for x in min_x.max(0)..=max_x {
                let on_lattice = x % stride as i64 == (stride / 2) as i64
                    && y % stride as i64 == (stride / 2) as i64;
                if on_lattice && point_in_region(region, x, y) {
                    out.push((x as u32, y as u32));
                }
            }
        }
        out
    }

    #[test]
    fn square_region_stride_100() {
        let sq = RegionAnnotation::new(
            "s",
            "p",
            TissueClass::Stroma,
            vec![(0, 0), (200, 0), (200, 200), (0, 200)],
        )
        .unwrap();
        let plan = ExtractionPlan {
            stride: 100,
            ..Default::default()
        };
        let centers = plan_centers(&sq, &plan).unwrap();
        assert_eq!(centers, brute_force_centers(&sq, 100));
        assert_eq!(centers, vec![(50, 50), (150, 50), (50, 150), (150, 150)]);
    }

    #[test]
    fn large_stride_and_sliver() {
        let sq = RegionAnnotation::new(
            "s",
            "p",
            TissueClass::Stroma,
            vec![(0, 0), (200, 0), (200, 200), (0, 200)],
        )
        .unwrap();
        let plan = ExtractionPlan {
            stride: 1000,
            ..Default::default()
        };
        assert!(plan_centers(&sq, &plan).unwrap().len() <= 1);
        let sliver = RegionAnnotation::new(
            "s",
            "p",
            TissueClass::Blood,
            vec![(70, 10), (120, 11), (70, 12)],
        )
        .unwrap();
        assert!(plan_centers(&sliver, &ExtractionPlan::default())
            .unwrap()
            .is_empty());
        let zero = ExtractionPlan {
            stride: 0,
            ..Default::default()
        };
        assert!(plan_centers(&sq, &zero).is_err());
    }

    #[test]
    fn planned_centers_match_brute_force_on_synthetic_regions() {
        let (_, regions) =
            generate_synthetic(&SyntheticSpec::new("s", "p", 11, 3072, 3072)).unwrap();
        for stride in [96u32, 128, 200] {
            let plan = ExtractionPlan {
                stride,
                ..Default::default()
            };
            for r in &regions {
                assert_eq!(
                    plan_centers(r, &plan).unwrap(),
                    brute_force_centers(r, stride)
                );
            }
        }
    }
}
