use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::{DatasetSplit, Dihedral, Sample, TileRef};
use crate::error::{Error, Result};
use crate::tiling::TileArchive;

const HEADER: &str = "archive\tindex\tsplit\taugment\tseed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::format(format!("unknown split tag '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub archive: String,
    pub index: u32,
    pub split: SplitTag,
    pub augment: Dihedral,
    pub seed: u64,
}

/// Tab-separated, one record per line, after a single header line.
pub fn write_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{HEADER}")?;
        for (tag, samples) in split.partitions() {
            for s in samples {
                writeln!(
                    w,
                    "{}\t{}\t{tag}\t{}\t{}",
                    split.archives[s.tile.archive as usize], s.tile.index, s.augment, split.seed
                )?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

fn parse_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line == HEADER || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(format!("{}:{}: {msg}", path.display(), n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        out.push(ManifestRecord {
            archive: fields[0].to_string(),
            index: fields[1].parse().map_err(|_| bad("bad tile index"))?,
            split: fields[2].parse()?,
            augment: fields[3].parse()?,
            seed: fields[4].parse().map_err(|_| bad("bad seed"))?,
        });
    }
    Ok(out)
}

/// Reads a manifest and resolves labels and patients through `load`, which
/// maps an archive path (as written in the manifest) to the archive.
pub fn read_manifest<F>(path: &Path, mut load: F) -> Result<(DatasetSplit, Vec<TileArchive>)>
where
    F: FnMut(&str) -> Result<TileArchive>,
{
    let records = parse_records(path)?;
    let mut archives: Vec<String> = Vec::new();
    let mut loaded: Vec<TileArchive> = Vec::new();
    let mut split = DatasetSplit {
        archives: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: records.first().map_or(0, |r| r.seed),
    };
    for r in records {
        if r.seed != split.seed {
            return Err(Error::format(format!(
                "{}: mixed seeds in manifest",
                path.display()
            )));
        }
        let archive = match archives.iter().position(|a| *a == r.archive) {
            Some(i) => i,
            None => {
                loaded.push(load(&r.archive)?);
                archives.push(r.archive.clone());
                archives.len() - 1
            }
        };
        let triplet = loaded[archive].tiles.get(r.index as usize).ok_or_else(|| {
            Error::format(format!(
                "{}: tile index {} out of range",
                r.archive, r.index
            ))
        })?;
        let sample = Sample {
            tile: TileRef {
                archive: archive as u32,
                index: r.index,
            },
            label: triplet.label,
            patient_id: triplet.patient_id.clone(),
            augment: r.augment,
        };
        match r.split {
            SplitTag::Train => split.train.push(sample),
            SplitTag::Val => split.val.push(sample),
            SplitTag::Test => split.test.push(sample),
        }
    }
    split.archives = archives;
    Ok((split, loaded))
}
