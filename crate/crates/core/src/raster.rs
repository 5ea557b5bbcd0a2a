//! 8-bit rasters (grayscale or RGB), PNG I/O, and the conversions between
//! raster space and the `[-1, 1]` float tensors the networks consume.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image, `channels` of 1 (gray) or 3 (RGB), row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Degenerate(format!("raster {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "Raster::new",
                format!("{} bytes", width * height * channels),
                format!("{}", data.len()),
            ));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Raster::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Luma conversion (ITU-R 601 weights) if RGB; clone if already gray.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8
            })
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Channel-replicate gray to RGB; clone if already RGB.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn load_png(path: &Path) -> Result<Raster> {
        let img =
            image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let raster = match img {
            image::DynamicImage::ImageLuma8(g) => {
                Raster::new(g.width() as usize, g.height() as usize, 1, g.into_raw())?
            }
            other => {
                let rgb = other.to_rgb8();
                Raster::new(
                    rgb.width() as usize,
                    rgb.height() as usize,
                    3,
                    rgb.into_raw(),
                )?
            }
        };
        Ok(raster)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let result = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.clone())
                .expect("buffer length checked at construction")
                .save(path),
            _ => image::RgbImage::from_raw(w, h, self.data.clone())
                .expect("buffer length checked at construction")
                .save(path),
        };
        result.map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Byte `[0, 255]` to float `[-1, 1]` NCHW tensor (batch of one).
    /// The map is exactly invertible on the 8-bit grid.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; self.channels * plane];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    data[c * plane + y * self.width + x] = byte_to_signed(self.get(x, y, c));
                }
            }
        }
        Tensor::new(vec![1, self.channels, self.height, self.width], data).expect("consistent dims")
    }

    /// Inverse of [`Raster::to_tensor`]: clamps to `[-1, 1]` then rounds to
    /// the 8-bit grid. Accepts a `1xCxHxW` tensor with C of 1 or 3.
    pub fn from_tensor(t: &Tensor) -> Result<Raster> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || (c != 1 && c != 3) {
            return Err(Error::shape(
                "Raster::from_tensor",
                "1x{1|3}xHxW",
                format!("{:?}", t.shape()),
            ));
        }
        let plane = h * w;
        let mut data = vec![0u8; c * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[ch * plane + y * w + x];
                    data[(y * w + x) * c + ch] = signed_to_byte(v);
                }
            }
        }
        Raster::new(w, h, c, data)
    }

    /// Bilinear resample to `dw x dh` (pixel-center convention).
    pub fn resize_bilinear(&self, dw: usize, dh: usize) -> Result<Raster> {
        if dw == 0 || dh == 0 {
            return Err(Error::Degenerate(format!("resize target {dw}x{dh}")));
        }
        if dw == self.width && dh == self.height {
            return Ok(self.clone());
        }
        let mut out = vec![0u8; dw * dh * self.channels];
        for c in 0..self.channels {
            let src: Vec<f64> = (0..self.width * self.height)
                .map(|i| self.data[i * self.channels + c] as f64)
                .collect();
            let plane = resize_bilinear_plane(&src, self.width, self.height, dw, dh);
            for (i, v) in plane.iter().enumerate() {
                out[i * self.channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Raster::new(dw, dh, self.channels, out)
    }
}

#[inline]
pub fn byte_to_signed(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

#[inline]
pub fn signed_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Bilinear resample of one float plane, pixel-center convention with edge
/// clamping.
pub fn resize_bilinear_plane(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh);
    let mut out = Vec::with_capacity(dw * dh);
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}
