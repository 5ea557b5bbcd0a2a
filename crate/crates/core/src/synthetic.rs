//! Procedural fixtures: a textured registration phantom and a paired
//! translation task (soft low-contrast shape in, sharp textured shape out)
//! used by the self-test suite and the end-to-end tests.

use crate::raster::Raster;
use crate::rng::RngStream;
use crate::training::SamplePair;

/// Textured ellipse phantom on a dark background: smooth interior stripes
/// plus a few bright blobs, with an antialiased rim. Otsu separates it
/// cleanly and the texture gives intensity registration something to lock
/// onto.
pub fn textured_phantom(size: usize, seed: u64) -> Raster {
    let mut rng = RngStream::new(seed);
    let s = size as f64;
    let cx = s * (0.48 + 0.04 * rng.uniform());
    let cy = s * (0.48 + 0.04 * rng.uniform());
    let rx = s * (0.26 + 0.05 * rng.uniform());
    let ry = s * (0.20 + 0.05 * rng.uniform());
    let theta = rng.uniform() * std::f64::consts::PI;
    let (ct, st) = (theta.cos(), theta.sin());
    let blobs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.uniform() * std::f64::consts::TAU;
            let r = rng.uniform() * 0.5;
            (
                cx + r * rx * a.cos(),
                cy + r * ry * a.sin(),
                s * (0.03 + 0.02 * rng.uniform()),
            )
        })
        .collect();

    let mut data = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (ct * dx + st * dy) / rx;
            let v = (-st * dx + ct * dy) / ry;
            let rho = (u * u + v * v).sqrt();
            // Signed distance to the rim, approximately in pixels.
            let edge = (1.0 - rho) * rx.min(ry);
            let inside = (edge / 1.5).clamp(0.0, 1.0);

            let mut val = 8.0 + 10.0 * (x as f64 + y as f64) / (2.0 * s);
            if inside > 0.0 {
                let stripes = 150.0 + 55.0 * (8.0 * u).sin() * (6.0 * v).cos();
                let mut tex = stripes;
                for &(bx, by, br) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    if d2 < br * br {
                        tex = 235.0;
                    }
                }
                val = val * (1.0 - inside) + tex * inside;
            }
            data[y * size + x] = val.round().clamp(0.0, 255.0) as u8;
        }
    }
    Raster::new(size, size, 1, data).expect("square phantom")
}

/// One paired sample: the same random ellipse rendered twice.
///
/// Input ("acquisition" side): grayscale, low contrast, heavily box-blurred.
/// Target ("stain" side): RGB, sharp rim, striped interior with a fixed
/// palette. The mapping input -> target is deterministic given the shape, so
/// a conditional generator can learn it from few examples.
pub fn paired_sample(size: usize, rng: &mut RngStream) -> (Raster, Raster) {
    let s = size as f64;
    let cx = s * (0.35 + 0.3 * rng.uniform());
    let cy = s * (0.35 + 0.3 * rng.uniform());
    let rx = s * (0.15 + 0.15 * rng.uniform());
    let ry = s * (0.15 + 0.15 * rng.uniform());
    let theta = rng.uniform() * std::f64::consts::PI;
    let (ct, st) = (theta.cos(), theta.sin());

    let mut field = vec![0.0f64; size * size];
    let mut stripe = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (ct * dx + st * dy) / rx;
            let v = (-st * dx + ct * dy) / ry;
            let rho = (u * u + v * v).sqrt();
            let edge = (1.0 - rho) * rx.min(ry);
            field[y * size + x] = (edge / 1.2).clamp(0.0, 1.0);
            stripe[y * size + x] = 0.5 + 0.5 * (7.0 * u).sin();
        }
    }

    // Blurred, low-contrast input.
    let blurred = box_blur(&box_blur(&field, size, size, 2), size, size, 2);
    let input: Vec<u8> = blurred
        .iter()
        .map(|&m| (52.0 + 55.0 * m).round().clamp(0.0, 255.0) as u8)
        .collect();

    // Sharp, textured target.
    let mut target = vec![0u8; size * size * 3];
    for i in 0..size * size {
        let m = field[i];
        let t = stripe[i];
        let (r, g, b) = if m > 0.0 {
            let base = (130.0 + 90.0 * t, 45.0 + 40.0 * t, 110.0 + 60.0 * t);
            (
                base.0 * m + 238.0 * (1.0 - m),
                base.1 * m + 232.0 * (1.0 - m),
                base.2 * m + 242.0 * (1.0 - m),
            )
        } else {
            (238.0, 232.0, 242.0)
        };
        target[i * 3] = r.round().clamp(0.0, 255.0) as u8;
        target[i * 3 + 1] = g.round().clamp(0.0, 255.0) as u8;
        target[i * 3 + 2] = b.round().clamp(0.0, 255.0) as u8;
    }

    (
        Raster::new(size, size, 1, input).expect("square input"),
        Raster::new(size, size, 3, target).expect("square target"),
    )
}

fn box_blur(src: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let r = radius as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        acc += src[sy as usize * w + sx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y as usize * w + x as usize] = acc / n;
        }
    }
    out
}

/// Deterministic paired dataset as rasters.
pub fn paired_rasters(n: usize, size: usize, seed: u64) -> Vec<(Raster, Raster)> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| paired_sample(size, &mut rng)).collect()
}

/// Deterministic paired dataset as training tensors.
pub fn paired_dataset(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    paired_rasters(n, size, seed)
        .into_iter()
        .map(|(x, y)| SamplePair::new(x.to_tensor(), y.to_tensor()).expect("matched dims"))
        .collect()
}
