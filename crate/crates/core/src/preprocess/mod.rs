//! Raster preprocessing: box-filter downsampling, intensity-based affine
//! registration with Dice validation, thresholding, and non-overlapping
//! tiling with coordinate manifests for lossless stitching.

mod registration;
mod tiling;

pub use registration::{
    register_affine, registration_dice, RegistrationConfig, RegistrationResult, Similarity,
};
pub use tiling::{stitch, tile, tile_plan, PadPolicy, TileEntry, TileManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

// ── downsampling ──

/// Area-averaging (box filter) downsample by a real factor >= 1. Output dims
/// are `round(input / factor)`, at least 1. The fractional boxes partition
/// the source exactly, so constant images and the global mean are preserved.
pub fn downsample(image: &Raster, factor: f64) -> Result<Raster> {
    if factor.is_nan() || factor < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "downsample factor {factor} must be >= 1"
        )));
    }
    let ow = ((image.width() as f64 / factor).round() as usize).max(1);
    let oh = ((image.height() as f64 / factor).round() as usize).max(1);
    if (ow, oh) == (image.width(), image.height()) {
        return Ok(image.clone());
    }
    let sx = image.width() as f64 / ow as f64;
    let sy = image.height() as f64 / oh as f64;
    let ch = image.channels();
    let mut out = vec![0u8; ow * oh * ch];
    for oy in 0..oh {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        let yi0 = y0.floor() as usize;
        let yi1 = (y1.ceil() as usize).min(image.height());
        for ox in 0..ow {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let xi0 = x0.floor() as usize;
            let xi1 = (x1.ceil() as usize).min(image.width());
            for c in 0..ch {
                let mut acc = 0.0;
                let mut area = 0.0;
                for y in yi0..yi1 {
                    let wy = (y1.min((y + 1) as f64) - y0.max(y as f64)).max(0.0);
                    if wy == 0.0 {
                        continue;
                    }
                    for x in xi0..xi1 {
                        let wx = (x1.min((x + 1) as f64) - x0.max(x as f64)).max(0.0);
                        if wx == 0.0 {
                            continue;
                        }
                        acc += wy * wx * image.get(x, y, c) as f64;
                        area += wy * wx;
                    }
                }
                out[(oy * ow + ox) * ch + c] = (acc / area).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(ow, oh, ch, out)
}

// ── affine transforms and warping ──

/// Row-major 2x3 matrix `[a b tx; c d ty]` mapping moving-image pixel
/// coordinates into fixed-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub matrix: [[f64; 3]; 2],
}

impl AffineTransform2D {
    pub fn identity() -> Self {
        AffineTransform2D {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        AffineTransform2D {
            matrix: [[a, b, tx], [c, d, ty]],
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn inverse(&self) -> Result<AffineTransform2D> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform(det));
        }
        let m = &self.matrix;
        let (a, b, tx, c, d, ty) = (m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]);
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(AffineTransform2D::new(
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ))
    }

    /// `self` after `other`: maps `p` to `self(other(p))`.
    pub fn compose(&self, other: &AffineTransform2D) -> AffineTransform2D {
        let s = &self.matrix;
        let o = &other.matrix;
        AffineTransform2D::new(
            s[0][0] * o[0][0] + s[0][1] * o[1][0],
            s[0][0] * o[0][1] + s[0][1] * o[1][1],
            s[0][0] * o[0][2] + s[0][1] * o[1][2] + s[0][2],
            s[1][0] * o[0][0] + s[1][1] * o[1][0],
            s[1][0] * o[0][1] + s[1][1] * o[1][1],
            s[1][0] * o[0][2] + s[1][1] * o[1][2] + s[1][2],
        )
    }
}

/// Resample `image` into the fixed frame of `out_dims = (width, height)`:
/// each output pixel is inverse-mapped through `t` and sampled bilinearly;
/// out-of-bounds reads fill with 0.
pub fn warp(image: &Raster, t: &AffineTransform2D, out_dims: (usize, usize)) -> Result<Raster> {
    let inv = t.inverse()?;
    let (ow, oh) = out_dims;
    let ch = image.channels();
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0u8; ow * oh * ch];
    for oy in 0..oh {
        for ox in 0..ow {
            let (mx, my) = inv.apply(ox as f64, oy as f64);
            if mx < 0.0 || my < 0.0 || mx > (w - 1) as f64 || my > (h - 1) as f64 {
                continue;
            }
            let x0 = mx.floor() as usize;
            let y0 = my.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = mx - x0 as f64;
            let fy = my - y0 as f64;
            for c in 0..ch {
                let top =
                    image.get(x0, y0, c) as f64 * (1.0 - fx) + image.get(x1, y0, c) as f64 * fx;
                let bot =
                    image.get(x0, y1, c) as f64 * (1.0 - fx) + image.get(x1, y1, c) as f64 * fx;
                out[(oy * ow + ox) * ch + c] =
                    (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(ow, oh, ch, out)
}

// ── masks and Dice ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMethod {
    Otsu,
    Fixed(u8),
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Foreground = intensity strictly above the threshold. Otsu picks the
/// threshold maximizing between-class variance; a constant image has no
/// split and is rejected.
pub fn threshold_mask(image: &Raster, method: ThresholdMethod) -> Result<Mask> {
    let gray = image.to_gray();
    let t = match method {
        ThresholdMethod::Fixed(t) => t,
        ThresholdMethod::Otsu => otsu_threshold(gray.data())?,
    };
    Ok(Mask {
        width: gray.width(),
        height: gray.height(),
        data: gray.data().iter().map(|&v| v > t).collect(),
    })
}

fn otsu_threshold(pixels: &[u8]) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &p in pixels {
        hist[p as usize] += 1;
    }
    let total = pixels.len() as f64;
    let global_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &n)| v as f64 * n as f64)
        .sum();

    let mut best: Option<(f64, u8)> = None;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for (t, &count) in hist.iter().enumerate().take(255) {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (global_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, t as u8));
        }
    }
    match best {
        Some((_, t)) => Ok(t),
        None => Err(Error::Degenerate("otsu on a constant image".into())),
    }
}

/// Dice overlap `2|A∩B| / (|A| + |B|)`; two empty masks count as perfect
/// agreement (1.0).
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "dice",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
