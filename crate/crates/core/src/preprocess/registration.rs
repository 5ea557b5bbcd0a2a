//! Intensity-based affine registration: coarse-to-fine pyramid, derivative-
//! free Nelder-Mead over six pose parameters (rotation, per-axis log scale,
//! shear, translation), normalized cross-correlation or mean-squared-error
//! cost, centroid/spread initialization.

use serde::{Deserialize, Serialize};

use super::{downsample, threshold_mask, warp, AffineTransform2D, ThresholdMethod};
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Mse,
    /// Normalized cross-correlation; robust to the intensity-relationship
    /// gap between modalities.
    Ncc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Downsample factors, strictly decreasing, ending at 1.
    pub pyramid: Vec<u32>,
    pub similarity: Similarity,
    /// Nelder-Mead iterations per pyramid level.
    pub iterations_per_level: usize,
    /// Simplex cost-spread convergence tolerance.
    pub tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            pyramid: vec![4, 2, 1],
            similarity: Similarity::Ncc,
            iterations_per_level: 250,
            tolerance: 1e-9,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid.is_empty() || *self.pyramid.last().unwrap() != 1 {
            return Err(Error::InvalidConfig("pyramid must end at factor 1".into()));
        }
        if self.pyramid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidConfig(
                "pyramid factors must be strictly decreasing".into(),
            ));
        }
        if self.iterations_per_level == 0 {
            return Err(Error::InvalidConfig(
                "iterations_per_level must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: AffineTransform2D,
    /// Final cost: `-NCC` (so -1 is a perfect match) or mean squared error.
    pub residual: f64,
    /// False when the last level hit its iteration cap before the simplex
    /// collapsed; the transform is still the best one found.
    pub converged: bool,
    pub iterations: usize,
}

/// Pose parameters: rotation, log scale x/y, shear, translation x/y
/// (translations in full-resolution pixels).
type Pose = [f64; 6];

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_raster(r: &Raster) -> Plane {
        let g = r.to_gray();
        Plane {
            w: g.width(),
            h: g.height(),
            data: g.data().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    #[inline]
    fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if x < 0.0 || y < 0.0 || x > (self.w - 1) as f64 || y > (self.h - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.data[y0 * self.w + x0] * (1.0 - fx) + self.data[y0 * self.w + x1] * fx;
        let bot = self.data[y1 * self.w + x0] * (1.0 - fx) + self.data[y1 * self.w + x1] * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// Intensity-weighted centroid and per-axis spread.
    fn moments(&self) -> (f64, f64, f64, f64) {
        let mut total = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.data[y * self.w + x];
                total += v;
                cx += v * x as f64;
                cy += v * y as f64;
            }
        }
        if total <= 0.0 {
            return (
                (self.w - 1) as f64 / 2.0,
                (self.h - 1) as f64 / 2.0,
                1.0,
                1.0,
            );
        }
        cx /= total;
        cy /= total;
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.data[y * self.w + x];
                sx += v * (x as f64 - cx) * (x as f64 - cx);
                sy += v * (y as f64 - cy) * (y as f64 - cy);
            }
        }
        (
            (cx),
            (cy),
            (sx / total).sqrt().max(1e-6),
            (sy / total).sqrt().max(1e-6),
        )
    }
}

fn pose_linear(pose: &Pose) -> [f64; 4] {
    let (ca, sa) = (pose[0].cos(), pose[0].sin());
    let (esx, esy) = (pose[1].exp(), pose[2].exp());
    let shear = pose[3];
    // R(angle) * diag(scale) * [[1, shear], [0, 1]]
    [
        ca * esx,
        ca * esx * shear - sa * esy,
        sa * esx,
        sa * esx * shear + ca * esy,
    ]
}

/// Transform at one pyramid level: rotation/scale/shear about the moving
/// center, then a translation aligned to the fixed center. Translation
/// parameters live in full-resolution pixels and are divided by the level
/// factor.
fn pose_to_transform(
    pose: &Pose,
    moving: (usize, usize),
    fixed: (usize, usize),
    factor: f64,
) -> AffineTransform2D {
    let [a, b, c, d] = pose_linear(pose);
    let cmx = (moving.0 - 1) as f64 / 2.0;
    let cmy = (moving.1 - 1) as f64 / 2.0;
    let cfx = (fixed.0 - 1) as f64 / 2.0;
    let cfy = (fixed.1 - 1) as f64 / 2.0;
    let tx = cfx + pose[4] / factor - (a * cmx + b * cmy);
    let ty = cfy + pose[5] / factor - (c * cmx + d * cmy);
    AffineTransform2D::new(a, b, tx, c, d, ty)
}

/// Cost of a pose at one level. Samples the fixed grid (strided to a few
/// thousand points), inverse-maps into the moving image, and scores valid
/// pairs; poses that leave too little overlap are heavily penalized.
fn pose_cost(
    pose: &Pose,
    moving: &Plane,
    fixed: &Plane,
    factor: f64,
    similarity: Similarity,
) -> f64 {
    let t = pose_to_transform(pose, (moving.w, moving.h), (fixed.w, fixed.h), factor);
    let Ok(inv) = t.inverse() else {
        return 4.0;
    };
    let stride = (((fixed.w * fixed.h) as f64 / 6000.0).sqrt().ceil() as usize).max(1);
    let mut pairs_f = Vec::new();
    let mut pairs_m = Vec::new();
    let mut grid = 0usize;
    for y in (0..fixed.h).step_by(stride) {
        for x in (0..fixed.w).step_by(stride) {
            grid += 1;
            let (mx, my) = inv.apply(x as f64, y as f64);
            if let Some(v) = moving.sample_bilinear(mx, my) {
                pairs_f.push(fixed.data[y * fixed.w + x]);
                pairs_m.push(v);
            }
        }
    }
    let n = pairs_f.len();
    if n < 16 || (n as f64) < 0.25 * grid as f64 {
        return 3.0;
    }
    match similarity {
        Similarity::Mse => {
            pairs_f
                .iter()
                .zip(&pairs_m)
                .map(|(f, m)| (f - m) * (f - m))
                .sum::<f64>()
                / n as f64
        }
        Similarity::Ncc => {
            let nf = n as f64;
            let mf = pairs_f.iter().sum::<f64>() / nf;
            let mm = pairs_m.iter().sum::<f64>() / nf;
            let mut num = 0.0;
            let mut df = 0.0;
            let mut dm = 0.0;
            for (f, m) in pairs_f.iter().zip(&pairs_m) {
                num += (f - mf) * (m - mm);
                df += (f - mf) * (f - mf);
                dm += (m - mm) * (m - mm);
            }
            if df <= 1e-12 || dm <= 1e-12 {
                return 3.0;
            }
            -(num / (df.sqrt() * dm.sqrt()))
        }
    }
}

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 0.5, shrink
/// 0.5). Returns the best vertex, its cost, whether the simplex collapsed
/// below `tol`, and iterations used.
fn nelder_mead<F>(
    f: F,
    x0: Pose,
    steps: Pose,
    max_iter: usize,
    tol: f64,
) -> (Pose, f64, bool, usize)
where
    F: Fn(&Pose) -> f64,
{
    const DIM: usize = 6;
    let mut simplex: Vec<(Pose, f64)> = Vec::with_capacity(DIM + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..DIM {
        let mut v = x0;
        v[i] += steps[i];
        simplex.push((v, f(&v)));
    }

    let mut iters = 0;
    let mut converged = false;
    while iters < max_iter {
        iters += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[DIM].1 - simplex[0].1;
        if spread.abs() < tol {
            converged = true;
            break;
        }
        let mut centroid = [0.0; DIM];
        for (v, _) in &simplex[..DIM] {
            for (ci, vi) in centroid.iter_mut().zip(v) {
                *ci += vi / DIM as f64;
            }
        }
        let worst = simplex[DIM];
        let mut reflect = [0.0; DIM];
        for (i, r) in reflect.iter_mut().enumerate() {
            *r = centroid[i] + (centroid[i] - worst.0[i]);
        }
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let mut expand = [0.0; DIM];
            for i in 0..DIM {
                expand[i] = centroid[i] + 2.0 * (centroid[i] - worst.0[i]);
            }
            let fe = f(&expand);
            simplex[DIM] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[DIM - 1].1 {
            simplex[DIM] = (reflect, fr);
        } else {
            let (base, fbase) = if fr < worst.1 {
                (reflect, fr)
            } else {
                (worst.0, worst.1)
            };
            let mut contract = [0.0; DIM];
            for (i, cvar) in contract.iter_mut().enumerate() {
                *cvar = centroid[i] + 0.5 * (base[i] - centroid[i]);
            }
            let fc = f(&contract);
            if fc < fbase {
                simplex[DIM] = (contract, fc);
            } else {
                let best = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    for (e, b) in entry.0.iter_mut().zip(&best) {
                        *e = b + 0.5 * (*e - b);
                    }
                    entry.1 = f(&entry.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0, simplex[0].1, converged, iters)
}

/// Estimate the affine transform aligning `moving` onto `fixed`.
///
/// Coarse-to-fine: each pyramid level refines the pose found at the previous
/// one. The starting pose aligns intensity centroids and spreads. A run that
/// exhausts its iterations without simplex collapse still returns the best
/// transform, flagged `converged: false`.
pub fn register_affine(
    moving: &Raster,
    fixed: &Raster,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let moving_full = Plane::from_raster(moving);
    let fixed_full = Plane::from_raster(fixed);

    // Centroid/spread initialization in full-resolution coordinates.
    let (mcx, mcy, msx, msy) = moving_full.moments();
    let (fcx, fcy, fsx, fsy) = fixed_full.moments();
    let mut pose: Pose = [
        0.0,
        (fsx / msx).ln().clamp(-0.5, 0.5),
        (fsy / msy).ln().clamp(-0.5, 0.5),
        0.0,
        0.0,
        0.0,
    ];
    // Solve the translation so the centroids coincide under the initial pose.
    let probe = pose_to_transform(
        &pose,
        (moving_full.w, moving_full.h),
        (fixed_full.w, fixed_full.h),
        1.0,
    );
    let (px, py) = probe.apply(mcx, mcy);
    pose[4] = fcx - px;
    pose[5] = fcy - py;

    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for &factor in &cfg.pyramid {
        let (mv, fx);
        let (moving_lv, fixed_lv) = if factor == 1 {
            (&moving_full, &fixed_full)
        } else {
            mv = Plane::from_raster(&downsample(moving, factor as f64)?);
            fx = Plane::from_raster(&downsample(fixed, factor as f64)?);
            (&mv, &fx)
        };
        let f64_factor = factor as f64;
        let cost = |p: &Pose| pose_cost(p, moving_lv, fixed_lv, f64_factor, cfg.similarity);
        let steps: Pose = [0.06, 0.05, 0.05, 0.03, 3.0 * f64_factor, 3.0 * f64_factor];
        let (best, best_cost, conv, used) =
            nelder_mead(cost, pose, steps, cfg.iterations_per_level, cfg.tolerance);
        pose = best;
        residual = best_cost;
        converged = conv;
        iterations += used;
    }

    let transform = pose_to_transform(
        &pose,
        (moving_full.w, moving_full.h),
        (fixed_full.w, fixed_full.h),
        1.0,
    );
    if !residual.is_finite() {
        return Err(Error::NonFinite("registration cost".into()));
    }
    Ok(RegistrationResult {
        transform,
        residual,
        converged,
        iterations,
    })
}

/// Alignment quality: warp `moving` with `t`, Otsu-threshold both images,
/// return the mask Dice overlap.
pub fn registration_dice(moving: &Raster, fixed: &Raster, t: &AffineTransform2D) -> Result<f64> {
    let warped = warp(moving, t, (fixed.width(), fixed.height()))?;
    let wm = threshold_mask(&warped, ThresholdMethod::Otsu)?;
    let fm = threshold_mask(fixed, ThresholdMethod::Otsu)?;
    super::dice(&wm, &fm)
}
