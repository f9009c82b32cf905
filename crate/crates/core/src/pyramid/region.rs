use serde::{Deserialize, Serialize};

use crate::class::TissueClass;
use crate::error::{Error, Result};

/// Labeled polygonal region in base-level (400x) coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub slide_id: String,
    pub patient_id: String,
    pub label: TissueClass,
    pub polygon: Vec<(i64, i64)>,
}

impl RegionAnnotation {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: TissueClass,
        polygon: Vec<(i64, i64)>,
    ) -> Result<Self> {
        if polygon.len() < 3 {
            return Err(Error::InvalidAnnotation(format!(
                "polygon needs at least 3 vertices, got {}",
                polygon.len()
            )));
        }
        if !is_simple(&polygon) {
            return Err(Error::InvalidAnnotation(
                "polygon is self-intersecting".into(),
            ));
        }
        Ok(RegionAnnotation {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            label,
            polygon,
        })
    }

    pub fn check_bounds(&self, width: u32, height: u32) -> Result<()> {
        for &(x, y) in &self.polygon {
            if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                return Err(Error::InvalidAnnotation(format!(
                    "vertex ({x}, {y}) outside {width}x{height}"
                )));
            }
        }
        Ok(())
    }

    /// Inclusive bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (i64, i64, i64, i64) {
        let xs = self.polygon.iter().map(|p| p.0);
        let ys = self.polygon.iter().map(|p| p.1);
        (
            xs.clone().min().unwrap_or(0),
            ys.clone().min().unwrap_or(0),
            xs.max().unwrap_or(0),
            ys.max().unwrap_or(0),
        )
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        point_in_region(self, x, y)
    }
}

fn orient(a: (i64, i64), b: (i64, i64), c: (i64, i64)) -> i128 {
    (b.0 - a.0) as i128 * (c.1 - a.1) as i128 - (b.1 - a.1) as i128 * (c.0 - a.0) as i128
}

fn on_segment(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    orient(a, b, p) == 0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn segments_intersect(a: (i64, i64), b: (i64, i64), c: (i64, i64), d: (i64, i64)) -> bool {
    let (o1, o2) = (orient(a, b, c).signum(), orient(a, b, d).signum());
    let (o3, o4) = (orient(c, d, a).signum(), orient(c, d, b).signum());
    if o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 {
        return true;
    }
    on_segment(a, b, c) || on_segment(a, b, d) || on_segment(c, d, a) || on_segment(c, d, b)
}

fn is_simple(poly: &[(i64, i64)]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if adjacent {
                // adjacent edges may only share their common vertex
                let (shared, u, v) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                let folds_back = orient(u, shared, v) == 0
                    && (u.0 - shared.0) * (v.0 - shared.0) + (u.1 - shared.1) * (v.1 - shared.1)
                        > 0;
                if folds_back {
                    return false;
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Even-odd membership test; points on the boundary count as inside.
pub fn point_in_region(region: &RegionAnnotation, x: i64, y: i64) -> bool {
    let poly = &region.polygon;
    let n = poly.len();
    let p = (x, y);
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(a, b, p) {
            return true;
        }
        if (a.1 > y) != (b.1 > y) {
            // x coordinate of the edge at height y, compared exactly
            let lhs = (x - a.0) as i128 * (b.1 - a.1) as i128;
            let rhs = (b.0 - a.0) as i128 * (y - a.1) as i128;
            let crosses = if b.1 > a.1 { lhs < rhs } else { lhs > rhs };
            if crosses {
                inside = !inside;
            }
        }
    }
    inside
}
