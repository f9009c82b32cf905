//! Glue between the stages: synthetic cohorts, cache work lists, and head
//! feature matrices for a dataset split.

use std::collections::BTreeSet;

use crate::dataset::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::model::{FeatureCache, Model, TileKey};
use crate::nn::Tensor;
use crate::pyramid::SyntheticSpec;
use crate::seed;
use crate::tiling::{TileArchive, TileTriplet};
use crate::training::{FeatureSet, SplitFeatures};

/// One synthetic slide per patient, `slide_000`/`patient_000` onwards, each
/// with its own derived seed.
pub fn cohort_specs(slides: usize, width: u32, height: u32, seed: u64) -> Vec<SyntheticSpec> {
    (0..slides)
        .map(|i| {
            SyntheticSpec::new(
                format!("slide_{i:03}"),
                format!("patient_{i:03}"),
                seed::derive(seed, &[seed::tag("slide"), i as u64]),
                width,
                height,
            )
        })
        .collect()
}

fn lookup<'a>(archives: &'a [TileArchive], s: &Sample) -> Result<(TileKey, &'a TileTriplet)> {
    let archive = archives
        .get(s.tile.archive as usize)
        .ok_or_else(|| Error::Input(format!("sample refers to archive {}", s.tile.archive)))?;
    let triplet = archive.tiles.get(s.tile.index as usize).ok_or_else(|| {
        Error::Input(format!(
            "sample refers to tile {} of a {}-tile archive",
            s.tile.index,
            archive.len()
        ))
    })?;
    let key = TileKey {
        archive_hash: archive.hash,
        index: s.tile.index,
        augment: s.augment,
    };
    Ok((key, triplet))
}

/// Distinct `(tile, augment)` pairs used by any partition, sorted by key.
pub fn cache_items<'a>(
    split: &DatasetSplit,
    archives: &'a [TileArchive],
) -> Result<Vec<(TileKey, &'a TileTriplet)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in split.train.iter().chain(&split.val).chain(&split.test) {
        let (key, t) = lookup(archives, s)?;
        if seen.insert(key) {
            out.push((key, t));
        }
    }
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}

fn feature_set(
    model: &Model,
    samples: &[Sample],
    archives: &[TileArchive],
    cache: &FeatureCache,
) -> Result<FeatureSet> {
    let width = model.config.head_input_width();
    let mut data = Vec::with_capacity(samples.len() * width);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let (key, t) = lookup(archives, s)?;
        data.extend(model.head_input(t, s.augment, Some((cache, &key)))?);
        labels.push(s.label.index());
    }
    FeatureSet::new(Tensor::from_vec(&[samples.len(), width], data)?, labels)
}

/// Head inputs for every partition. Entries missing from `cache` are
/// computed on the fly.
pub fn build_features(
    model: &Model,
    split: &DatasetSplit,
    archives: &[TileArchive],
    cache: &FeatureCache,
) -> Result<SplitFeatures> {
    Ok(SplitFeatures {
        train: feature_set(model, &split.train, archives, cache)?,
        val: feature_set(model, &split.val, archives, cache)?,
        test: feature_set(model, &split.test, archives, cache)?,
    })
}
