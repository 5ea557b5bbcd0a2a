//! Paired dataset loading: directory A (input modality, grayscale) and
//! directory B (target modality, RGB), matched by filename stem. Stems are
//! sorted lexicographically so training order never depends on filesystem
//! enumeration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use xmt_core::raster::Raster;
use xmt_core::training::SamplePair;

#[derive(Debug)]
pub struct PairedDataset {
    /// Sorted by stem.
    pub stems: Vec<String>,
    pub pairs: Vec<SamplePair>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries =
        std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            == Some("png".into())
        {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .with_context(|| format!("non-UTF-8 filename {}", path.display()))?
                .to_string();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Load and pair the two directories. Every A stem must have exactly one B
/// counterpart; anything unmatched is an error naming the stem. A decodes to
/// 1 channel, B to 3; bytes map onto `[-1, 1]`.
pub fn load_pairs(dir_a: &Path, dir_b: &Path) -> Result<PairedDataset> {
    let a = png_stems(dir_a)?;
    let b = png_stems(dir_b)?;
    for stem in a.keys() {
        if !b.contains_key(stem) {
            bail!(
                "stem {stem:?} present in {} but missing from {}",
                dir_a.display(),
                dir_b.display()
            );
        }
    }
    for stem in b.keys() {
        if !a.contains_key(stem) {
            bail!(
                "stem {stem:?} present in {} but missing from {}",
                dir_b.display(),
                dir_a.display()
            );
        }
    }
    if a.is_empty() {
        bail!("no PNG files in {}", dir_a.display());
    }

    let mut stems = Vec::with_capacity(a.len());
    let mut pairs = Vec::with_capacity(a.len());
    for (stem, path_a) in &a {
        let ra = Raster::load_png(path_a)?.to_gray();
        let rb = Raster::load_png(&b[stem])?.to_rgb();
        if (ra.width(), ra.height()) != (rb.width(), rb.height()) {
            bail!(
                "stem {stem:?}: A is {}x{} but B is {}x{}",
                ra.width(),
                ra.height(),
                rb.width(),
                rb.height()
            );
        }
        let pair = SamplePair::new(ra.to_tensor(), rb.to_tensor())?;
        stems.push(stem.clone());
        pairs.push(pair);
    }
    Ok(PairedDataset { stems, pairs })
}

/// Load a directory of PNGs as `(stem, raster)` in stem order.
pub fn load_set(dir: &Path) -> Result<Vec<(String, Raster)>> {
    let found = png_stems(dir)?;
    if found.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    found
        .into_iter()
        .map(|(stem, path)| Ok((stem, Raster::load_png(&path)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use xmt_core::rng::RngStream;

    fn write_png(dir: &Path, name: &str, w: usize, h: usize, channels: usize, seed: u64) {
        let mut rng = RngStream::new(seed);
        let data = (0..w * h * channels)
            .map(|_| (rng.next_u64() % 256) as u8)
            .collect();
        Raster::new(w, h, channels, data)
            .unwrap()
            .save_png(&dir.join(name))
            .unwrap();
    }

    #[test]
    fn matched_stems_load_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        for stem in ["s3", "s1", "s2", "s5", "s4"] {
            write_png(&a, &format!("{stem}.png"), 8, 8, 1, 1);
            write_png(&b, &format!("{stem}.png"), 8, 8, 3, 2);
        }
        let ds = load_pairs(&a, &b).unwrap();
        assert_eq!(ds.stems, vec!["s1", "s2", "s3", "s4", "s5"]);
        assert_eq!(ds.pairs.len(), 5);
        assert_eq!(ds.pairs[0].x.shape(), &[1, 1, 8, 8]);
        assert_eq!(ds.pairs[0].y.shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn unmatched_stem_is_an_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        write_png(&a, "x.png", 4, 4, 1, 1);
        write_png(&b, "x.png", 4, 4, 3, 2);
        write_png(&b, "extra.png", 4, 4, 3, 3);
        let err = load_pairs(&a, &b).unwrap_err().to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn byte_range_maps_to_signed_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        Raster::new(2, 1, 1, vec![0, 255])
            .unwrap()
            .save_png(&a.join("p.png"))
            .unwrap();
        Raster::new(2, 1, 3, vec![0, 0, 0, 255, 255, 255])
            .unwrap()
            .save_png(&b.join("p.png"))
            .unwrap();
        let ds = load_pairs(&a, &b).unwrap();
        assert_eq!(ds.pairs[0].x.data()[0], -1.0);
        assert_eq!(ds.pairs[0].x.data()[1], 1.0);
    }
}
