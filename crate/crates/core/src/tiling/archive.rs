use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Tile, TileTriplet, TILE_BYTES};
use crate::class::{Magnification, ScaleSet, TissueClass};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSTL";
const VERSION: u32 = 1;
const ID_WIDTH: usize = 32;

/// In-memory tile archive with the SHA-256 of its serialized form.
#[derive(Clone, Debug)]
pub struct TileArchive {
    pub tiles: Vec<TileTriplet>,
    pub hash: [u8; 32],
}

impl TileArchive {
    pub fn new(tiles: Vec<TileTriplet>) -> Result<Self> {
        let bytes = encode(&tiles)?;
        Ok(TileArchive {
            hash: Sha256::digest(&bytes).into(),
            tiles,
        })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

fn put_id(buf: &mut Vec<u8>, id: &str) -> Result<()> {
    let bytes = id.as_bytes();
    if bytes.len() > ID_WIDTH || bytes.contains(&0) {
        return Err(Error::format(format!(
            "identifier '{id}' does not fit {ID_WIDTH} bytes"
        )));
    }
    buf.extend_from_slice(bytes);
    buf.extend(std::iter::repeat_n(0u8, ID_WIDTH - bytes.len()));
    Ok(())
}

fn encode(tiles: &[TileTriplet]) -> Result<Vec<u8>> {
    let per_tile: usize = tiles
        .iter()
        .map(|t| 74 + t.scales_present().len() * TILE_BYTES)
        .sum();
    let mut buf = Vec::with_capacity(12 + per_tile);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tiles.len() as u32).to_le_bytes());
    for t in tiles {
        buf.push(t.label.index() as u8);
        buf.push(t.scales_present().bits());
        buf.extend_from_slice(&t.center_base.0.to_le_bytes());
        buf.extend_from_slice(&t.center_base.1.to_le_bytes());
        put_id(&mut buf, &t.slide_id)?;
        put_id(&mut buf, &t.patient_id)?;
        for tile in t.tiles.iter().flatten() {
            buf.extend_from_slice(tile.as_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("tile archive truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn id(&mut self) -> Result<String> {
        let raw = self.take(ID_WIDTH)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(ID_WIDTH);
        String::from_utf8(raw[..end].to_vec()).map_err(|_| Error::format("identifier is not UTF-8"))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<TileTriplet>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("not a TSTL tile archive"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported tile archive version {version}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut tiles = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = TissueClass::from_index(cur.take(1)?[0] as usize)?;
        let scales = ScaleSet::from_bits(cur.take(1)?[0])?;
        let center_base = (cur.u32()?, cur.u32()?);
        let slide_id = cur.id()?;
        let patient_id = cur.id()?;
        let mut slots: [Option<Tile>; 3] = Default::default();
        for m in Magnification::ALL {
            if scales.contains(m) {
                slots[m.code() as usize] = Some(Tile::from_bytes(cur.take(TILE_BYTES)?.to_vec())?);
            }
        }
        tiles.push(TileTriplet {
            slide_id,
            patient_id,
            label,
            center_base,
            tiles: slots,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("trailing bytes after tile archive"));
    }
    Ok(tiles)
}

/// Writes the archive and returns the SHA-256 of the written bytes.
pub fn write_archive(tiles: &[TileTriplet], path: &Path) -> Result<[u8; 32]> {
    let bytes = encode(tiles)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).into())
}

pub fn read_archive(path: &Path) -> Result<TileArchive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tiles = decode(&bytes)?;
    Ok(TileArchive {
        hash: Sha256::digest(&bytes).into(),
        tiles,
    })
}
