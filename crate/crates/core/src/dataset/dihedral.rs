use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiling::{Tile, TILE_SIZE};

/// The eight symmetries of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::format(format!("dihedral code {code} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "identity",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::FlipH => "flip-h",
            Dihedral::FlipV => "flip-v",
            Dihedral::Transpose => "transpose",
            Dihedral::AntiTranspose => "anti-transpose",
        }
    }

    /// Source coordinate read by output pixel `(x, y)` in an `n+1`-wide square.
    #[inline]
    pub fn source(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (x, y),
            Dihedral::Rot90 => (y, n - x),
            Dihedral::Rot180 => (n - x, n - y),
            Dihedral::Rot270 => (n - y, x),
            Dihedral::FlipH => (n - x, y),
            Dihedral::FlipV => (x, n - y),
            Dihedral::Transpose => (y, x),
            Dihedral::AntiTranspose => (n - y, n - x),
        }
    }

    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    /// The transform equal to applying `self` first, then `next`.
    pub fn then(self, next: Dihedral) -> Dihedral {
        // probe with an asymmetric 3x3 pattern
        let probe = |t: &dyn Fn(usize, usize) -> (usize, usize)| [t(0, 0), t(1, 0), t(0, 1)];
        let composed = probe(&|x, y| {
            let (sx, sy) = next.source(x, y, 2);
            self.source(sx, sy, 2)
        });
        Self::ALL
            .into_iter()
            .find(|d| probe(&|x, y| d.source(x, y, 2)) == composed)
            .expect("dihedral group is closed")
    }
}

impl fmt::Display for Dihedral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dihedral {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::format(format!("unknown augment tag '{s}'")))
    }
}

pub fn apply_dihedral(tile: &Tile, transform: Dihedral) -> Tile {
    if transform == Dihedral::Identity {
        return tile.clone();
    }
    let src = tile.as_bytes();
    let mut out = Tile::filled(0);
    let dst = out.as_bytes_mut();
    let n = TILE_SIZE - 1;
    for y in 0..TILE_SIZE {
        for x in 0..TILE_SIZE {
            let (sx, sy) = transform.source(x, y, n);
            let s = (sy * TILE_SIZE + sx) * 3;
            let d = (y * TILE_SIZE + x) * 3;
            dst[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}
