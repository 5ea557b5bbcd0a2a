//! Non-overlapping tiling with a coordinate manifest, and the exact inverse
//! stitch. Tiles are keyed by id, so delivery order never matters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadPolicy {
    /// Error on dimensions not divisible by the tile size.
    Reject,
    /// Zero-fill the bottom/right margins; stitching crops them back off.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: u32,
    pub row: u32,
    pub col: u32,
    pub x0: u32,
    pub y0: u32,
}

/// Coordinate record of one tiling: enough to reassemble the source exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileManifest {
    pub source_w: u32,
    pub source_h: u32,
    pub tile_size: u32,
    pub pad: PadPolicy,
    pub tiles: Vec<TileEntry>,
}

impl TileManifest {
    pub fn rows(&self) -> usize {
        (self.source_h as usize).div_ceil(self.tile_size as usize)
    }

    pub fn cols(&self) -> usize {
        (self.source_w as usize).div_ceil(self.tile_size as usize)
    }

    pub fn padded_width(&self) -> usize {
        self.cols() * self.tile_size as usize
    }

    pub fn padded_height(&self) -> usize {
        self.rows() * self.tile_size as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::InvalidConfig("tile_size must be >= 1".into()));
        }
        let expected = self.rows() * self.cols();
        if self.tiles.len() != expected {
            return Err(Error::Format(format!(
                "manifest has {} tiles, grid needs {expected}",
                self.tiles.len()
            )));
        }
        let mut seen = vec![false; expected];
        for t in &self.tiles {
            let (r, c) = (t.row as usize, t.col as usize);
            if r >= self.rows() || c >= self.cols() {
                return Err(Error::Format(format!(
                    "tile {} at row {r} col {c} outside grid",
                    t.id
                )));
            }
            if t.x0 != t.col * self.tile_size || t.y0 != t.row * self.tile_size {
                return Err(Error::Format(format!(
                    "tile {} coordinates disagree with its grid cell",
                    t.id
                )));
            }
            let slot = r * self.cols() + c;
            if seen[slot] {
                return Err(Error::DuplicateTile(t.id));
            }
            seen[slot] = true;
        }
        Ok(())
    }
}

/// Plan a raster-order tiling of a `w x h` source.
pub fn tile_plan(w: usize, h: usize, tile_size: usize, pad: PadPolicy) -> Result<TileManifest> {
    if tile_size == 0 {
        return Err(Error::InvalidConfig("tile_size must be >= 1".into()));
    }
    if w == 0 || h == 0 {
        return Err(Error::Degenerate(format!("tiling a {w}x{h} source")));
    }
    if pad == PadPolicy::Reject && !(w.is_multiple_of(tile_size) && h.is_multiple_of(tile_size)) {
        return Err(Error::InvalidConfig(format!(
            "{w}x{h} is not divisible by tile size {tile_size} under the reject policy"
        )));
    }
    let rows = h.div_ceil(tile_size);
    let cols = w.div_ceil(tile_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            tiles.push(TileEntry {
                id: (row * cols + col) as u32,
                row: row as u32,
                col: col as u32,
                x0: (col * tile_size) as u32,
                y0: (row * tile_size) as u32,
            });
        }
    }
    Ok(TileManifest {
        source_w: w as u32,
        source_h: h as u32,
        tile_size: tile_size as u32,
        pad,
        tiles,
    })
}

/// Cut `image` into non-overlapping `tile_size` squares in raster order.
pub fn tile(
    image: &Raster,
    tile_size: usize,
    pad: PadPolicy,
) -> Result<(Vec<Raster>, TileManifest)> {
    let manifest = tile_plan(image.width(), image.height(), tile_size, pad)?;
    let ch = image.channels();
    let mut tiles = Vec::with_capacity(manifest.tiles.len());
    for entry in &manifest.tiles {
        let mut data = vec![0u8; tile_size * tile_size * ch];
        for ty in 0..tile_size {
            let sy = entry.y0 as usize + ty;
            if sy >= image.height() {
                break;
            }
            let span = tile_size.min(image.width().saturating_sub(entry.x0 as usize));
            let src = (sy * image.width() + entry.x0 as usize) * ch;
            let dst = ty * tile_size * ch;
            data[dst..dst + span * ch].copy_from_slice(&image.data()[src..src + span * ch]);
        }
        tiles.push(Raster::new(tile_size, tile_size, ch, data)?);
    }
    Ok((tiles, manifest))
}

/// Reassemble tiles by manifest coordinates and crop any padding. Exact
/// inverse of [`tile`]; delivery order is irrelevant.
pub fn stitch(tiles: &[(u32, Raster)], manifest: &TileManifest) -> Result<Raster> {
    manifest.validate()?;
    let ts = manifest.tile_size as usize;
    let (w, h) = (manifest.source_w as usize, manifest.source_h as usize);

    let mut by_id = std::collections::HashMap::with_capacity(tiles.len());
    for (id, raster) in tiles {
        if by_id.insert(*id, raster).is_some() {
            return Err(Error::DuplicateTile(*id));
        }
    }

    let ch = match tiles.first() {
        Some((_, r)) => r.channels(),
        None => return Err(Error::Degenerate("no tiles supplied".into())),
    };

    let mut out = vec![0u8; w * h * ch];
    for entry in &manifest.tiles {
        let tile = *by_id.get(&entry.id).ok_or(Error::MissingTile(entry.id))?;
        if tile.width() != ts || tile.height() != ts || tile.channels() != ch {
            return Err(Error::shape(
                "stitch",
                format!("{ts}x{ts}x{ch} tile"),
                format!("{}x{}x{}", tile.width(), tile.height(), tile.channels()),
            ));
        }
        let x0 = entry.x0 as usize;
        let y0 = entry.y0 as usize;
        for ty in 0..ts {
            let sy = y0 + ty;
            if sy >= h {
                break;
            }
            let span = ts.min(w.saturating_sub(x0));
            if span == 0 {
                continue;
            }
            let src = ty * ts * ch;
            let dst = (sy * w + x0) * ch;
            out[dst..dst + span * ch].copy_from_slice(&tile.data()[src..src + span * ch]);
        }
    }
    Raster::new(w, h, ch, out)
}
