use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Level, PyramidImage, RegionAnnotation};
use crate::class::{Magnification, TissueClass};
use crate::error::{Error, Result};

const RASTER_MAGIC: &[u8; 4] = b"TSPX";
const RASTER_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    slide_id: String,
    patient_id: String,
    levels: Vec<ManifestLevel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLevel {
    magnification: String,
    width: u32,
    height: u32,
    file: String,
}

/// Writes a `TSPX` raster: magic, u32 version, u32 width, u32 height, RGB bytes.
pub fn write_raster(level: &Level, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(RASTER_MAGIC);
    header.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    header.extend_from_slice(&level.width.to_le_bytes());
    header.extend_from_slice(&level.height.to_le_bytes());
    w.write_all(&header)
        .and_then(|_| w.write_all(&level.pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a `TSPX` raster, returning `(width, height, pixels)`.
pub fn read_raster(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err(Error::format(format!(
            "{}: not a TSPX raster",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != RASTER_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported raster version {version}",
            path.display()
        )));
    }
    let (width, height) = (word(8), word(12));
    let payload = bytes.split_off(16);
    let expected = width as usize * height as usize * 3;
    if payload.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: header says {width}x{height} ({expected} bytes) but payload is {} bytes",
            path.display(),
            payload.len()
        )));
    }
    Ok((width, height, payload))
}

fn level_file(m: Magnification) -> String {
    format!("level_{}.tspx", m.tag())
}

pub fn save_pyramid(pyramid: &PyramidImage, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut levels = Vec::new();
    for level in pyramid.levels() {
        let file = level_file(level.magnification);
        write_raster(level, &dir.join(&file))?;
        levels.push(ManifestLevel {
            magnification: level.magnification.tag().to_string(),
            width: level.width,
            height: level.height,
            file,
        });
    }
    let manifest = Manifest {
        slide_id: pyramid.slide_id.clone(),
        patient_id: pyramid.patient_id.clone(),
        levels,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_pyramid(dir: &Path) -> Result<PyramidImage> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut levels = Vec::with_capacity(3);
    for mag in Magnification::ALL {
        let entry = manifest
            .levels
            .iter()
            .find(|l| l.magnification == mag.tag())
            .ok_or_else(|| Error::MissingLevel {
                level: mag.tag().to_string(),
                path: path.clone(),
            })?;
        let raster_path = dir.join(&entry.file);
        if !raster_path.exists() {
            return Err(Error::MissingLevel {
                level: mag.tag().to_string(),
                path: raster_path,
            });
        }
        let (w, h, pixels) = read_raster(&raster_path)?;
        if (w, h) != (entry.width, entry.height) {
            return Err(Error::DimensionMismatch(format!(
                "{}: manifest says {}x{}, raster holds {w}x{h}",
                raster_path.display(),
                entry.width,
                entry.height
            )));
        }
        levels.push(Level::new(mag, w, h, pixels)?);
    }
    PyramidImage::new(manifest.slide_id, manifest.patient_id, levels)
}

/// One region per line: `label patient_id x0,y0 x1,y1 ...`.
pub fn save_annotations(regions: &[RegionAnnotation], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in regions {
        let verts: Vec<String> = r.polygon.iter().map(|(x, y)| format!("{x},{y}")).collect();
        writeln!(w, "{} {} {}", r.label, r.patient_id, verts.join(" "))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path, slide_id: &str) -> Result<Vec<RegionAnnotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::format(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let mut fields = line.split_whitespace();
        let label: TissueClass = fields.next().ok_or_else(|| bad("missing label"))?.parse()?;
        let patient = fields.next().ok_or_else(|| bad("missing patient id"))?;
        let polygon = fields
            .map(|v| {
                let (x, y) = v.split_once(',').ok_or_else(|| bad("vertex must be x,y"))?;
                let x = x.parse::<i64>().map_err(|_| bad("bad x coordinate"))?;
                let y = y.parse::<i64>().map_err(|_| bad("bad y coordinate"))?;
                Ok((x, y))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(RegionAnnotation::new(slide_id, patient, label, polygon)?);
    }
    Ok(out)
}
