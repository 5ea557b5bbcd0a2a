//! Perceptual evaluation over image sets.
//!
//! A fixed convolutional extractor with weights generated from a documented
//! constant seed stands in for the usual pretrained backbones, which keeps
//! every score reproducible from source alone. Consequence: these are
//! *proxy* metrics — relative comparisons and the metric properties are
//! meaningful, absolute values are not comparable to pretrained-backbone
//! implementations, and every report says so.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::RngStream;
use crate::tensor::{conv2d_raw, Tensor};

/// Seed of the fixed extractor weights. Changing it changes every score;
/// reports embed it for provenance.
pub const EXTRACTOR_SEED: u64 = 0x584D_5446_5830_3031;

const NOTES: &str = "proxy-FID/proxy-LPIPS from a fixed seeded extractor; \
absolute values are not comparable to pretrained-backbone metrics";

const STAGES: [(usize, usize); 3] = [(3, 16), (16, 32), (32, 64)];
const LEAKY_SLOPE: f64 = 0.2;

/// Fixed three-stage strided conv stack; final stage pools to 64 features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
    input_side: usize,
    seed: u64,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::with_seed(EXTRACTOR_SEED, 64)
    }
}

impl FeatureExtractor {
    pub fn with_seed(seed: u64, input_side: usize) -> Self {
        let mut rng = RngStream::new(seed);
        let weights = STAGES
            .iter()
            .map(|&(ci, co)| {
                let std = 1.0 / ((ci * 9) as f64).sqrt();
                Tensor::randn(&[co, ci, 3, 3], 0.0, std, &mut rng)
            })
            .collect();
        FeatureExtractor {
            weights,
            input_side,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        STAGES[STAGES.len() - 1].1
    }

    fn prepare(&self, image: &Raster) -> Result<Tensor> {
        let rgb = image
            .to_rgb()
            .resize_bilinear(self.input_side, self.input_side)?;
        let plane = self.input_side * self.input_side;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..self.input_side {
            for x in 0..self.input_side {
                for c in 0..3 {
                    data[c * plane + y * self.input_side + x] = rgb.get(x, y, c) as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![1, 3, self.input_side, self.input_side], data)
    }

    /// Post-activation feature maps of each stage.
    pub fn stage_maps(&self, image: &Raster) -> Result<Vec<Tensor>> {
        let mut h = self.prepare(image)?;
        let mut taps = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let conv = conv2d_raw(&h, w, 2, 1)?;
            let mut act = conv;
            for v in act.data_mut() {
                if *v < 0.0 {
                    *v *= LEAKY_SLOPE;
                }
            }
            taps.push(act.clone());
            h = act;
        }
        Ok(taps)
    }

    /// Global-average-pooled final-stage features (length 64).
    pub fn pooled(&self, image: &Raster) -> Result<Vec<f64>> {
        let taps = self.stage_maps(image)?;
        let last = taps.last().expect("fixed stage count");
        let (_, c, h, w) = last.dims4()?;
        let plane = h * w;
        Ok((0..c)
            .map(|ch| {
                last.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .sum::<f64>()
                    / plane as f64
            })
            .collect())
    }
}

/// Pooled features for every image, row order preserved.
pub fn extract_features(fx: &FeatureExtractor, images: &[Raster]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::Degenerate(
            "feature extraction over an empty set".into(),
        ));
    }
    images.par_iter().map(|img| fx.pooled(img)).collect()
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `dim x dim`, symmetric.
    pub sigma: Vec<f64>,
    pub dim: usize,
}

/// Sample mean and unbiased covariance (divisor `n - 1`), symmetrized.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "covariance needs >= 2 samples, got {n}"
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape(
            "gaussian_stats",
            format!("rows of dim {dim}"),
            "ragged rows".to_string(),
        ));
    }
    let mut mu = vec![0.0; dim];
    for row in features {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut sigma = vec![0.0; dim * dim];
    for row in features {
        for i in 0..dim {
            let di = row[i] - mu[i];
            for j in i..dim {
                sigma[i * dim + j] += di * (row[j] - mu[j]) / (n - 1) as f64;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            sigma[i * dim + j] = sigma[j * dim + i];
        }
    }
    Ok(GaussianStats { mu, sigma, dim })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the square root
/// taken along the symmetric PSD route `S1^(1/2) S2 S1^(1/2)`.
///
/// Rank-deficient covariances (tiny sets) get a `1e-6 I` jitter on both
/// sides; well-conditioned inputs are left untouched so closed-form cases
/// are exact. Eigenvalues below `-1e-8` (relative) reject the input as
/// non-PSD; small negative distance residue is clamped to zero.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.dim != s2.dim {
        return Err(Error::shape(
            "frechet_distance",
            format!("dim {}", s1.dim),
            format!("dim {}", s2.dim),
        ));
    }
    let d = s1.dim;
    let mut m1 = DMatrix::from_row_slice(d, d, &s1.sigma);
    let mut m2 = DMatrix::from_row_slice(d, d, &s2.sigma);

    let mut needs_jitter = false;
    for m in [&m1, &m2] {
        let eig = m.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min < -1e-8 * max.max(1.0) {
            return Err(Error::Degenerate(format!(
                "covariance is not PSD (eigenvalue {min})"
            )));
        }
        if min < 1e-10 * max.max(1.0) {
            needs_jitter = true;
        }
    }
    if needs_jitter {
        for i in 0..d {
            m1[(i, i)] += 1e-6;
            m2[(i, i)] += 1e-6;
        }
    }

    let root1 = sym_sqrt(&m1);
    let inner = &root1 * &m2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let mean_sq: f64 = s1
        .mu
        .iter()
        .zip(&s2.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let fd = mean_sq + m1.trace() + m2.trace() - 2.0 * tr_sqrt;
    if fd < 0.0 {
        if fd > -1e-6 {
            return Ok(0.0);
        }
        return Err(Error::Degenerate(format!(
            "Fréchet distance residue {fd} below clamp tolerance"
        )));
    }
    Ok(fd)
}

/// Fréchet distance between the feature Gaussians of two image sets.
pub fn fid(set_a: &[Raster], set_b: &[Raster], fx: &FeatureExtractor) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Degenerate(format!(
            "fid needs >= 2 images per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let fa = gaussian_stats(&extract_features(fx, set_a)?)?;
    let fb = gaussian_stats(&extract_features(fx, set_b)?)?;
    frechet_distance(&fa, &fb)
}

/// Perceptual distance: per-stage features unit-normalized along channels,
/// squared differences averaged spatially, stages summed with uniform
/// weights.
pub fn perceptual_distance(a: &Raster, b: &Raster, fx: &FeatureExtractor) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            "perceptual_distance",
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    let ta = fx.stage_maps(a)?;
    let tb = fx.stage_maps(b)?;
    let mut total = 0.0;
    for (ma, mb) in ta.iter().zip(&tb) {
        let (_, c, h, w) = ma.dims4()?;
        let plane = h * w;
        let mut stage = 0.0;
        for p in 0..plane {
            let mut na = 0.0;
            let mut nb = 0.0;
            for ch in 0..c {
                na += ma.data()[ch * plane + p].powi(2);
                nb += mb.data()[ch * plane + p].powi(2);
            }
            let na = na.sqrt() + 1e-10;
            let nb = nb.sqrt() + 1e-10;
            for ch in 0..c {
                let d = ma.data()[ch * plane + p] / na - mb.data()[ch * plane + p] / nb;
                stage += d * d;
            }
        }
        total += stage / plane as f64;
    }
    Ok(total)
}

/// Mean absolute pixel difference in `[0, 1]` intensity units; grayscale is
/// channel-replicated so cross-modal pairs type-check.
pub fn l1_raster(a: &Raster, b: &Raster) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            "l1_raster",
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    let (ra, rb) = (a.to_rgb(), b.to_rgb());
    let sum: f64 = ra
        .data()
        .iter()
        .zip(rb.data())
        .map(|(&x, &y)| ((x as f64) - (y as f64)).abs() / 255.0)
        .sum();
    Ok(sum / ra.data().len() as f64)
}

/// One evaluation block of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub comparison: String,
    pub fid: f64,
    pub lpips_mean: f64,
    pub l1_mean: f64,
    pub n_images: usize,
    pub extractor_seed: u64,
    pub notes: String,
}

/// Score a generated set against a reference set: proxy-FID over the sets,
/// mean proxy-LPIPS and mean L1 over name-matched pairs. Sets are paired by
/// filename stem; any mismatch is an error.
pub fn evaluate_pairs(
    generated: &[(String, Raster)],
    reference: &[(String, Raster)],
    comparison: &str,
    fx: &FeatureExtractor,
) -> Result<MetricReport> {
    let mut gen: Vec<&(String, Raster)> = generated.iter().collect();
    let mut refs: Vec<&(String, Raster)> = reference.iter().collect();
    gen.sort_by(|a, b| a.0.cmp(&b.0));
    refs.sort_by(|a, b| a.0.cmp(&b.0));
    if gen.len() != refs.len() {
        return Err(Error::Pairing(format!(
            "{} generated vs {} reference images",
            gen.len(),
            refs.len()
        )));
    }
    for (g, r) in gen.iter().zip(&refs) {
        if g.0 != r.0 {
            return Err(Error::Pairing(format!(
                "unmatched stems {:?} vs {:?}",
                g.0, r.0
            )));
        }
    }

    let gen_rasters: Vec<Raster> = gen.iter().map(|(_, r)| r.clone()).collect();
    let ref_rasters: Vec<Raster> = refs.iter().map(|(_, r)| r.clone()).collect();
    let fid_value = fid(&gen_rasters, &ref_rasters, fx)?;

    let pair_scores: Vec<(f64, f64)> = gen_rasters
        .par_iter()
        .zip(ref_rasters.par_iter())
        .map(|(g, r)| -> Result<(f64, f64)> {
            Ok((perceptual_distance(g, r, fx)?, l1_raster(g, r)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pair_scores.len();
    let lpips_mean = pair_scores.iter().map(|s| s.0).sum::<f64>() / n as f64;
    let l1_mean = pair_scores.iter().map(|s| s.1).sum::<f64>() / n as f64;

    let report = MetricReport {
        comparison: comparison.to_string(),
        fid: fid_value,
        lpips_mean,
        l1_mean,
        n_images: n,
        extractor_seed: fx.seed(),
        notes: NOTES.to_string(),
    };
    for (name, v) in [
        ("fid", report.fid),
        ("lpips_mean", report.lpips_mean),
        ("l1_mean", report.l1_mean),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(report)
}
