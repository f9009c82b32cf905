use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::Model;
use crate::class::Magnification;
use crate::dataset::Dihedral;
use crate::error::{Error, Result};
use crate::tiling::TileTriplet;

const MAGIC: &[u8; 4] = b"TSFC";
const VERSION: u32 = 1;

/// Identifies one (possibly augmented) triplet within an archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileKey {
    pub archive_hash: [u8; 32],
    pub index: u32,
    pub augment: Dihedral,
}

/// Branch feature vectors keyed by tile and scale. Each scale records the
/// hash of the branch weights that produced it, so a cache built by a TRI
/// model also serves MONO and DI models sharing those branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    /// Indexed by [`Magnification::code`].
    pub branch_hashes: [Option<[u8; 32]>; 3],
    entries: HashMap<(TileKey, Magnification), Vec<f32>>,
}

impl FeatureCache {
    pub fn new(branch_hashes: [Option<[u8; 32]>; 3]) -> Self {
        FeatureCache {
            branch_hashes,
            entries: HashMap::new(),
        }
    }

    /// Empty cache for the branches of `model`.
    pub fn for_model(model: &Model) -> Self {
        let mut hashes = [None; 3];
        for m in model.scales().iter() {
            hashes[m.code() as usize] = Some(model.scale_branch_hash(m));
        }
        FeatureCache::new(hashes)
    }

    pub fn get(&self, key: &TileKey, m: Magnification) -> Option<&[f32]> {
        self.entries.get(&(*key, m)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: TileKey, m: Magnification, features: Vec<f32>) {
        self.entries.insert((key, m), features);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        for m in model.scales().iter() {
            if self.branch_hashes[m.code() as usize] != Some(model.scale_branch_hash(m)) {
                return Err(Error::State(format!(
                    "feature cache was not built from this model's {m} branch"
                )));
            }
        }
        Ok(())
    }

    /// Entries sorted by key, for deterministic serialization.
    fn sorted(&self) -> Vec<(&(TileKey, Magnification), &Vec<f32>)> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by_key(|(k, _)| **k);
        v
    }
}

/// Computes branch features for every `(key, triplet)` and every model scale.
/// Work is spread over the rayon pool; results do not depend on thread count.
type ScaleFeatures = (TileKey, Magnification, Vec<f32>);

pub fn precompute_features(
    model: &Model,
    items: &[(TileKey, &TileTriplet)],
) -> Result<FeatureCache> {
    let scales: Vec<Magnification> = model.scales().iter().collect();
    let computed: Vec<Result<Vec<ScaleFeatures>>> = items
        .par_iter()
        .map(|(key, triplet)| {
            scales
                .iter()
                .map(|&m| {
                    let tile = triplet.tile(m).ok_or_else(|| {
                        Error::Input(format!("tile {} lacks the {m} scale", key.index))
                    })?;
                    Ok((*key, m, model.branch_features(m, tile, key.augment)?))
                })
                .collect()
        })
        .collect();
    let mut cache = FeatureCache::for_model(model);
    for item in computed {
        for (key, m, f) in item? {
            cache.insert(key, m, f);
        }
    }
    Ok(cache)
}

/// Layout: magic, u32 version, a scale-mask byte followed by one 32-byte
/// branch hash per scale in the mask (code order), u32 entry count, then per
/// entry the archive hash, u32 index, a scale byte (low nibble: scale code,
/// high nibble: augment code), u32 feature width, and raw f32 values.
pub fn write_cache(cache: &FeatureCache, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let mask = cache
        .branch_hashes
        .iter()
        .enumerate()
        .fold(0u8, |a, (i, h)| a | ((h.is_some() as u8) << i));
    buf.push(mask);
    for h in cache.branch_hashes.iter().flatten() {
        buf.extend_from_slice(h);
    }
    buf.extend_from_slice(&(cache.len() as u32).to_le_bytes());
    for ((key, m), features) in cache.sorted() {
        buf.extend_from_slice(&key.archive_hash);
        buf.extend_from_slice(&key.index.to_le_bytes());
        buf.push(m.code() | (key.augment.code() << 4));
        buf.extend_from_slice(&(features.len() as u32).to_le_bytes());
        for v in features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<FeatureCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(Error::format("feature cache truncated"));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::format("not a TSFC feature cache"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported feature cache version {version}"
        )));
    }
    let mask = take(1)?[0];
    if mask == 0 || mask > 0b111 {
        return Err(Error::format(format!("bad scale mask {mask:#x}")));
    }
    let mut hashes = [None; 3];
    for (i, h) in hashes.iter_mut().enumerate() {
        if mask & (1 << i) != 0 {
            *h = Some(take(32)?.try_into().unwrap());
        }
    }
    let mut cache = FeatureCache::new(hashes);
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    for _ in 0..count {
        let archive_hash: [u8; 32] = take(32)?.try_into().unwrap();
        let index = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let code = take(1)?[0];
        let m = Magnification::from_code(code & 0x0f)?;
        if hashes[m.code() as usize].is_none() {
            return Err(Error::format(format!(
                "entry for {m}, which the cache has no branch for"
            )));
        }
        let augment = Dihedral::from_code(code >> 4)?;
        let width = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(width * 4)?;
        let features = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cache.insert(
            TileKey {
                archive_hash,
                index,
                augment,
            },
            m,
            features,
        );
    }
    if pos != bytes.len() {
        return Err(Error::format("trailing bytes after feature cache"));
    }
    Ok(cache)
}
