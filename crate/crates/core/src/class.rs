//! Tissue classes and pyramid magnifications.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TissueClass {
    Urothelium,
    Stroma,
    Muscle,
    Damaged,
    Blood,
    Background,
}

impl TissueClass {
    pub const ALL: [TissueClass; NUM_CLASSES] = [
        TissueClass::Urothelium,
        TissueClass::Stroma,
        TissueClass::Muscle,
        TissueClass::Damaged,
        TissueClass::Blood,
        TissueClass::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::format(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Urothelium => "urothelium",
            TissueClass::Stroma => "stroma",
            TissueClass::Muscle => "muscle",
            TissueClass::Damaged => "damaged",
            TissueClass::Blood => "blood",
            TissueClass::Background => "background",
        }
    }

    /// Legend color used in rendered class maps.
    pub fn color(self) -> [u8; 3] {
        match self {
            TissueClass::Urothelium => [0, 160, 0],
            TissueClass::Stroma => [255, 150, 200],
            TissueClass::Muscle => [220, 0, 0],
            TissueClass::Damaged => [139, 90, 43],
            TissueClass::Blood => [153, 0, 30],
            TissueClass::Background => [255, 255, 255],
        }
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TissueClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::format(format!("unknown tissue class '{s}'")))
    }
}

/// Pyramid magnification. Adjacent levels differ by a linear factor of 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnification {
    X25,
    X100,
    X400,
}

impl Magnification {
    /// Coarse to fine.
    pub const ALL: [Magnification; 3] =
        [Magnification::X25, Magnification::X100, Magnification::X400];

    /// Base-level (400x) pixels per pixel of this level.
    pub fn factor(self) -> u32 {
        match self {
            Magnification::X25 => 16,
            Magnification::X100 => 4,
            Magnification::X400 => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Magnification::X25 => 0,
            Magnification::X100 => 1,
            Magnification::X400 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::format(format!("magnification code {code} out of range")))
    }

    pub fn bit(self) -> u8 {
        1 << self.code()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Magnification::X25 => "25x",
            Magnification::X100 => "100x",
            Magnification::X400 => "400x",
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::format(format!("unknown magnification '{s}'")))
    }
}

/// Set of magnifications, stored as a bitmask over [`Magnification::code`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleSet(u8);

impl ScaleSet {
    pub const ALL: ScaleSet = ScaleSet(0b111);

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & !0b111 != 0 {
            return Err(Error::format(format!("invalid scale bitmask {bits:#x}")));
        }
        Ok(ScaleSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Magnification) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn insert(&mut self, m: Magnification) {
        self.0 |= m.bit();
    }

    pub fn is_superset(self, other: ScaleSet) -> bool {
        self.0 & other.0 == other.0
    }

    /// Members in coarse-to-fine order.
    pub fn iter(self) -> impl Iterator<Item = Magnification> {
        Magnification::ALL
            .into_iter()
            .filter(move |m| self.contains(*m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl FromIterator<Magnification> for ScaleSet {
    fn from_iter<I: IntoIterator<Item = Magnification>>(iter: I) -> Self {
        let mut set = ScaleSet::default();
        for m in iter {
            set.insert(m);
        }
        set
    }
}

impl FromStr for ScaleSet {
    type Err = Error;

    /// Comma-separated tags, e.g. `100x,400x`.
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<Magnification>())
            .collect()
    }
}

impl fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<_> = self.iter().map(|m| m.tag()).collect();
        f.write_str(&tags.join(","))
    }
}
