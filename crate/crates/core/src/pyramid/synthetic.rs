use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Level, PyramidImage, RegionAnnotation};
use crate::class::{Magnification, TissueClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed;

/// Dark bands of `width` pixels repeating every `period` base pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub period: u32,
    pub width: u32,
    /// Multiplier applied to the base color inside a band.
    pub darken: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub color: [u8; 3],
    /// Uniform per-channel noise in `[-noise, noise]`.
    pub noise: u8,
    pub stripe: Option<Stripe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub slide_id: String,
    pub patient_id: String,
    pub seed: u64,
    pub base_width: u32,
    pub base_height: u32,
    pub regions_per_class: usize,
    /// Side of the square layout cells; one region per cell.
    pub cell_size: u32,
    /// Distance between a cell border and its annotated polygon.
    pub margin: u32,
    /// Indexed by [`TissueClass::index`].
    pub textures: [ClassTexture; NUM_CLASSES],
}

impl SyntheticSpec {
    /// Default textures. Stroma/muscle and damaged/blood share color and
    /// noise; muscle and blood additionally carry a 512-pixel-period stripe,
    /// so a single 128-pixel 400x tile often cannot tell the pair apart.
    pub fn default_textures() -> [ClassTexture; NUM_CLASSES] {
        let stripe = Some(Stripe {
            period: 512,
            width: 64,
            darken: 0.45,
        });
        let plain = |color, noise| ClassTexture {
            color,
            noise,
            stripe: None,
        };
        [
            plain([150, 80, 170], 30),
            plain([225, 150, 185], 30),
            ClassTexture {
                stripe,
                ..plain([225, 150, 185], 30)
            },
            plain([190, 120, 95], 40),
            ClassTexture {
                stripe,
                ..plain([190, 120, 95], 40)
            },
            plain([242, 240, 238], 8),
        ]
    }

    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        seed: u64,
        width: u32,
        height: u32,
    ) -> Self {
        SyntheticSpec {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            seed,
            base_width: width,
            base_height: height,
            regions_per_class: 1,
            cell_size: 1024,
            margin: 256,
            textures: Self::default_textures(),
        }
    }

    fn cells(&self) -> (u32, u32) {
        (
            self.base_width / self.cell_size,
            self.base_height / self.cell_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0
            || self.base_height == 0
            || !self.base_width.is_multiple_of(16)
            || !self.base_height.is_multiple_of(16)
        {
            return Err(Error::InvalidSpec(format!(
                "base dimensions {}x{} must be positive multiples of 16",
                self.base_width, self.base_height
            )));
        }
        if self.cell_size == 0 || 2 * self.margin + 16 > self.cell_size {
            return Err(Error::InvalidSpec(format!(
                "cell size {} too small for margin {}",
                self.cell_size, self.margin
            )));
        }
        let (cx, cy) = self.cells();
        let needed = self.regions_per_class * NUM_CLASSES;
        if ((cx * cy) as usize) < needed {
            return Err(Error::InvalidSpec(format!(
                "{cx}x{cy} layout cells cannot hold {needed} regions"
            )));
        }
        for t in &self.textures {
            if let Some(s) = t.stripe {
                if s.period <= 128
                    || s.width == 0
                    || s.width >= s.period
                    || !(0.0..=1.0).contains(&s.darken)
                {
                    return Err(Error::InvalidSpec(format!("invalid stripe {s:?}")));
                }
            }
        }
        Ok(())
    }
}

struct Cell {
    x0: u32,
    y0: u32,
    label: TissueClass,
    vertical: bool,
    phase: u32,
}

/// Deterministic synthetic slide: a grid of textured cells, each annotated by
/// an octagon inset from the cell border.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(PyramidImage, Vec<RegionAnnotation>)> {
    spec.validate()?;
    let (cx, cy) = spec.cells();
    let mut layout = seed::rng(spec.seed, &[seed::tag("layout")]);

    let mut order: Vec<u32> = (0..cx * cy).collect();
    order.shuffle(&mut layout);
    let mut cells: Vec<Option<Cell>> = (0..cx * cy).map(|_| None).collect();
    for (k, &idx) in order.iter().enumerate() {
        let label = TissueClass::ALL[k % NUM_CLASSES];
        let period = spec.textures[label.index()].stripe.map_or(1, |s| s.period);
        cells[idx as usize] = Some(Cell {
            x0: (idx % cx) * spec.cell_size,
            y0: (idx / cx) * spec.cell_size,
            label,
            vertical: layout.gen_bool(0.5),
            phase: layout.gen_range(0..period),
        });
    }

    let mut regions = Vec::with_capacity(cells.len());
    for cell in cells.iter().flatten() {
        let m = spec.margin as i64;
        let (x0, y0) = (cell.x0 as i64 + m, cell.y0 as i64 + m);
        let (x1, y1) = (
            (cell.x0 + spec.cell_size) as i64 - m - 1,
            (cell.y0 + spec.cell_size) as i64 - m - 1,
        );
        let max_cut = ((x1 - x0).min(y1 - y0) / 4).max(2);
        let mut cut = || layout.gen_range(1..max_cut);
        let (a, b, c, d) = (cut(), cut(), cut(), cut());
        let polygon = vec![
            (x0 + a, y0),
            (x1 - b, y0),
            (x1, y0 + b),
            (x1, y1 - c),
            (x1 - c, y1),
            (x0 + d, y1),
            (x0, y1 - d),
            (x0, y0 + a),
        ];
        let region = RegionAnnotation::new(&spec.slide_id, &spec.patient_id, cell.label, polygon)?;
        region.check_bounds(spec.base_width, spec.base_height)?;
        regions.push(region);
    }

    let (w, h) = (spec.base_width, spec.base_height);
    let mut noise = seed::rng(spec.seed, &[seed::tag("pixels")]);
    let background = spec.textures[TissueClass::Background.index()];
    let mut pixels = vec![0u8; w as usize * h as usize * 3];
    for y in 0..h {
        let row = &mut pixels[y as usize * w as usize * 3..(y as usize + 1) * w as usize * 3];
        for x in 0..w {
            let (gx, gy) = (x / spec.cell_size, y / spec.cell_size);
            let (texture, banded) = match (gx < cx && gy < cy)
                .then(|| cells[(gy * cx + gx) as usize].as_ref())
                .flatten()
            {
                Some(cell) => {
                    let t = spec.textures[cell.label.index()];
                    let banded = t.stripe.is_some_and(|s| {
                        let coord = if cell.vertical { x } else { y };
                        (coord + cell.phase) % s.period < s.width
                    });
                    (t, banded)
                }
                None => (background, false),
            };
            let r: u32 = noise.gen();
            let span = 2 * texture.noise as u32 + 1;
            let px = &mut row[x as usize * 3..x as usize * 3 + 3];
            for (c, out) in px.iter_mut().enumerate() {
                let mut base = texture.color[c] as f32;
                if banded {
                    base *= texture.stripe.map_or(1.0, |s| s.darken);
                }
                let byte = (r >> (8 * c)) & 0xff;
                let n = ((byte * span) >> 8) as i32 - texture.noise as i32;
                *out = (base.round() as i32 + n).clamp(0, 255) as u8;
            }
        }
    }

    let base = Level::new(Magnification::X400, w, h, pixels)?;
    let pyramid = PyramidImage::from_base(&spec.slide_id, &spec.patient_id, base)?;
    Ok((pyramid, regions))
}
