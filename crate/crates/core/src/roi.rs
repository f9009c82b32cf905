//! Slide-level class maps: the whole slide is tiled at the extraction stride,
//! every triplet is classified, and the argmax labels form a coarse map of
//! tissue regions.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use rayon::prelude::*;

use crate::class::{ScaleSet, TissueClass, NUM_CLASSES};
use crate::dataset::Dihedral;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Tensor;
use crate::pyramid::PyramidImage;
use crate::tiling::{extract_triplet, TileTriplet};
use crate::training::argmax;

/// Anything that maps triplets to class probabilities.
pub trait TileClassifier: Sync {
    fn scales(&self) -> ScaleSet;
    fn classify(&self, triplets: &[TileTriplet]) -> Result<Vec<[f32; NUM_CLASSES]>>;
}

impl TileClassifier for Model {
    fn scales(&self) -> ScaleSet {
        Model::scales(self)
    }

    fn classify(&self, triplets: &[TileTriplet]) -> Result<Vec<[f32; NUM_CLASSES]>> {
        let rows: Vec<Vec<f32>> = triplets
            .par_iter()
            .map(|t| self.head_input(t, Dihedral::Identity, None))
            .collect::<Result<_>>()?;
        let width = self.config.head_input_width();
        let probs =
            self.classify_features(Tensor::from_vec(&[rows.len(), width], rows.concat())?)?;
        Ok(probs.rows().map(|r| r.try_into().unwrap()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    pub cols: usize,
    pub rows: usize,
    pub stride: u32,
    /// Row-major.
    pub labels: Vec<TissueClass>,
    pub probs: Vec<[f32; NUM_CLASSES]>,
}

/// `ceil(extent / stride)`.
pub fn grid_dims(width: u32, height: u32, stride: u32) -> (usize, usize) {
    (
        width.div_ceil(stride) as usize,
        height.div_ceil(stride) as usize,
    )
}

/// Base-level center of grid cell `i` along an axis of `extent` pixels.
fn cell_center(i: usize, stride: u32, extent: u32) -> u32 {
    (i as u32 * stride + stride / 2).min(extent - 1)
}

pub fn classify_slide(
    pyramid: &PyramidImage,
    classifier: &impl TileClassifier,
    stride: u32,
    pad_value: u8,
) -> Result<ClassMap> {
    if stride == 0 {
        return Err(Error::usage("stride", "stride must be positive"));
    }
    let (w, h) = pyramid.base_dims();
    let (cols, rows) = grid_dims(w, h, stride);
    let mut labels = Vec::with_capacity(cols * rows);
    let mut probs = Vec::with_capacity(cols * rows);
    // one grid row at a time keeps memory bounded on large slides
    for r in 0..rows {
        let y = cell_center(r, stride, h);
        let triplets: Vec<TileTriplet> = (0..cols)
            .into_par_iter()
            .map(|c| {
                extract_triplet(
                    pyramid,
                    (cell_center(c, stride, w), y),
                    TissueClass::Background,
                    classifier.scales(),
                    pad_value,
                )
            })
            .collect::<Result<_>>()?;
        for p in classifier.classify(&triplets)? {
            labels.push(TissueClass::from_index(argmax(&p))?);
            probs.push(p);
        }
    }
    Ok(ClassMap {
        cols,
        rows,
        stride,
        labels,
        probs,
    })
}

fn symbol(c: TissueClass) -> char {
    match c {
        TissueClass::Urothelium => 'U',
        TissueClass::Stroma => 'S',
        TissueClass::Muscle => 'M',
        TissueClass::Damaged => 'D',
        TissueClass::Blood => 'B',
        TissueClass::Background => '.',
    }
}

impl ClassMap {
    pub fn label(&self, col: usize, row: usize) -> TissueClass {
        self.labels[row * self.cols + col]
    }

    /// One pixel per grid cell in the class legend colors.
    pub fn render(&self) -> RgbImage {
        let raw = self.labels.iter().flat_map(|c| c.color()).collect();
        RgbImage::from_raw(self.cols as u32, self.rows as u32, raw).expect("class map raster size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.render()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
    }

    /// One character per cell: U S M D B and `.` for background.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.cols + 1) * self.rows);
        for row in self.labels.chunks(self.cols) {
            out.extend(row.iter().map(|&c| symbol(c)));
            out.push('\n');
        }
        out
    }

    /// `col,row,label,p_<class>...` per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("col,row,label");
        for c in TissueClass::ALL {
            write!(out, ",p_{c}").unwrap();
        }
        out.push('\n');
        for (i, (l, p)) in self.labels.iter().zip(&self.probs).enumerate() {
            write!(out, "{},{},{l}", i % self.cols, i / self.cols).unwrap();
            for v in p {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}
