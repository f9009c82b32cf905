//! Patient-level train/val/test splitting, class balancing by dihedral
//! augmentation, and dataset manifests.

mod dihedral;
mod manifest;

pub use dihedral::{apply_dihedral, Dihedral};
pub use manifest::{read_manifest, write_manifest, ManifestRecord, SplitTag};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::class::{TissueClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seed;
use crate::tiling::TileArchive;

/// Position of a triplet inside one of the dataset's archives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileRef {
    pub archive: u32,
    pub index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tile: TileRef,
    pub label: TissueClass,
    pub patient_id: String,
    pub augment: Dihedral,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    /// Archive paths, indexed by [`TileRef::archive`].
    pub archives: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

/// Identity-augment samples for every triplet in `archive`.
pub fn samples_from_archive(archive_index: u32, archive: &TileArchive) -> Vec<Sample> {
    archive
        .tiles
        .iter()
        .enumerate()
        .map(|(i, t)| Sample {
            tile: TileRef {
                archive: archive_index,
                index: i as u32,
            },
            label: t.label,
            patient_id: t.patient_id.clone(),
            augment: Dihedral::Identity,
        })
        .collect()
}

/// Sizes of the train and val partitions for `n` non-test tiles.
pub fn train_val_sizes(n: usize) -> (usize, usize) {
    let train = n * 85 / 100;
    (train, n - train)
}

/// Returns `(train, val, test)`. Test gets every tile of `test_patients`; the
/// rest is shuffled with the seed and split 85/15 (train rounded down).
pub fn split_by_patient(
    samples: &[Sample],
    test_patients: &BTreeSet<String>,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let observed: BTreeSet<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    if let Some(unknown) = test_patients
        .iter()
        .find(|p| !observed.contains(p.as_str()))
    {
        return Err(Error::Input(format!(
            "test patient '{unknown}' has no tiles"
        )));
    }
    let (mut test, mut rest): (Vec<Sample>, Vec<Sample>) = samples
        .iter()
        .cloned()
        .partition(|s| test_patients.contains(&s.patient_id));
    if rest.is_empty() {
        return Err(Error::InsufficientData(
            "no tiles left for train/val after removing test patients".into(),
        ));
    }
    test.sort_by_key(|s| s.tile);
    rest.sort_by_key(|s| s.tile);
    rest.shuffle(&mut seed::rng(seed, &[seed::tag("split")]));
    let (n_train, _) = train_val_sizes(rest.len());
    let val = rest.split_off(n_train);
    Ok((rest, val, test))
}

/// Tops every minority class up to the majority count with augmented copies.
///
/// Class tiles are cycled in order; round `r` over a class uses the `r mod 7`-th
/// entry of a seeded permutation of the non-identity transforms.
pub fn balance_by_augmentation(train: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let mut by_class: BTreeMap<TissueClass, Vec<&Sample>> = BTreeMap::new();
    for s in train {
        by_class.entry(s.label).or_default().push(s);
    }
    if let Some(missing) = TissueClass::ALL.iter().find(|c| !by_class.contains_key(c)) {
        return Err(Error::Unbalanceable(missing.to_string()));
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut out = train.to_vec();
    for (class, members) in &by_class {
        let deficit = target - members.len();
        if deficit == 0 {
            continue;
        }
        let mut order: Vec<Dihedral> = Dihedral::ALL[1..].to_vec();
        order.shuffle(&mut seed::rng(
            seed,
            &[seed::tag("balance"), class.index() as u64],
        ));
        for k in 0..deficit {
            let src = members[k % members.len()];
            let round = k / members.len();
            out.push(Sample {
                augment: src.augment.then(order[round % order.len()]),
                ..src.clone()
            });
        }
    }
    Ok(out)
}

pub fn class_counts(samples: &[Sample]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1;
    }
    counts
}

/// Picks `count` test patients with a seeded draw over the sorted patient ids.
pub fn choose_test_patients(
    samples: &[Sample],
    count: usize,
    seed: u64,
) -> Result<BTreeSet<String>> {
    let patients: Vec<&str> = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if count >= patients.len() {
        return Err(Error::InsufficientData(format!(
            "{} patients cannot spare {count} for testing",
            patients.len()
        )));
    }
    let mut rng = seed::rng(seed, &[seed::tag("test-patients")]);
    Ok(patients
        .choose_multiple(&mut rng, count)
        .map(|p| p.to_string())
        .collect())
}

impl DatasetSplit {
    /// Splits by patient, then balances the train partition.
    pub fn build(
        archives: Vec<String>,
        samples: &[Sample],
        test_patients: &BTreeSet<String>,
        seed: u64,
    ) -> Result<Self> {
        let (train, val, test) = split_by_patient(samples, test_patients, seed)?;
        let train = balance_by_augmentation(&train, seed)?;
        Ok(DatasetSplit {
            archives,
            train,
            val,
            test,
            seed,
        })
    }

    pub fn check_patient_disjoint(&self) -> Result<()> {
        let test: BTreeSet<&str> = self.test.iter().map(|s| s.patient_id.as_str()).collect();
        match self
            .train
            .iter()
            .chain(&self.val)
            .find(|s| test.contains(s.patient_id.as_str()))
        {
            Some(s) => Err(Error::Input(format!(
                "patient {} appears in test and train/val",
                s.patient_id
            ))),
            None => Ok(()),
        }
    }

    pub fn partitions(&self) -> [(SplitTag, &[Sample]); 3] {
        [
            (SplitTag::Train, &self.train),
            (SplitTag::Val, &self.val),
            (SplitTag::Test, &self.test),
        ]
    }
}
