//! Planar RGB images in `[0, 1]` and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Planar `[r..., g..., b...]`, each plane row-major.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape {
                expected: format!("3x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let n = self.height * self.width;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::filled(h, w, [0.0; 3]);
        for (x, y, p) in rgb.enumerate_pixels() {
            out.set_pixel(
                y as usize,
                x as usize,
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ],
            );
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(quantize))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Area-average resampling of every plane.
    pub fn resize_area(&self, height: usize, width: usize) -> RgbImage {
        let data = (0..3)
            .flat_map(|c| area_resample(self.plane(c), self.height, self.width, height, width))
            .collect();
        RgbImage {
            height,
            width,
            data,
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> RgbImage {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(y, x, self.pixel(y / factor, x / factor));
            }
        }
        out
    }

    /// Zeroes every pixel whose mask value is below 0.5.
    pub fn masked(&self, mask: &[f64]) -> RgbImage {
        let n = self.height * self.width;
        let mut out = self.clone();
        for (i, &m) in mask.iter().enumerate().take(n) {
            if m < 0.5 {
                out.data[i] = 0.0;
                out.data[n + i] = 0.0;
                out.data[2 * n + i] = 0.0;
            }
        }
        out
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Exact area-average resampling of a single-channel map. Each output cell
/// is the mean of the source over its footprint, with fractional overlap
/// weights where the footprints do not align with source pixels.
pub fn area_resample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let ys = footprints(sh, dh);
    let xs = footprints(sw, dw);
    let mut out = vec![0.0; dh * dw];
    for (oy, yw) in ys.iter().enumerate() {
        for (ox, xw) in xs.iter().enumerate() {
            let mut acc = 0.0;
            let mut area = 0.0;
            for &(sy, wy) in yw {
                for &(sx, wx) in xw {
                    acc += src[sy * sw + sx] * wy * wx;
                    area += wy * wx;
                }
            }
            out[oy * dw + ox] = acc / area;
        }
    }
    out
}

/// Per output cell, the source indices it covers and their overlap lengths.
fn footprints(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}
