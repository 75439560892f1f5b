//! Minimal owned image buffers and sampling.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// 8-bit interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (self.width, self.height),
            });
        }
        Ok(())
    }

    /// Luma in `[0, 255]`.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear sample with horizontal wraparound and vertical clamping, as
    /// needed for equirectangular frames.
    #[inline]
    pub fn sample_wrapped(&self, x: f64, y: f64) -> [f32; 3] {
        let w = self.width as i64;
        let h = self.height as i64;
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = (x - x0f) as f32;
        let fy = (y - y0f) as f32;
        let x0 = (x0f as i64).rem_euclid(w) as usize;
        let x1 = (x0f as i64 + 1).rem_euclid(w) as usize;
        let y0 = y0f as usize;
        let y1 = (y0 + 1).min(h as usize - 1);
        self.blend(x0, x1, y0, y1, fx, fy)
    }

    /// Bilinear sample; `None` when `(x, y)` falls outside the pixel-center hull.
    #[inline]
    pub fn sample_bounded(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let eps = 1e-9;
        if !(x >= -eps && y >= -eps && x <= (self.width - 1) as f64 + eps && y <= (self.height - 1) as f64 + eps) {
            return None;
        }
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        Some(self.blend(x0, x1, y0, y1, fx, fy))
    }

    #[inline]
    fn blend(&self, x0: usize, x1: usize, y0: usize, y1: usize, fx: f32, fy: f32) -> [f32; 3] {
        let a = self.get(x0, y0);
        let b = self.get(x1, y0);
        let c = self.get(x0, y1);
        let d = self.get(x1, y1);
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] as f32 * (1.0 - fx) + b[k] as f32 * fx;
            let bot = c[k] as f32 * (1.0 - fx) + d[k] as f32 * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

#[inline]
pub fn to_u8(c: [f32; 3]) -> [u8; 3] {
    [
        c[0].round().clamp(0.0, 255.0) as u8,
        c[1].round().clamp(0.0, 255.0) as u8,
        c[2].round().clamp(0.0, 255.0) as u8,
    ]
}

/// sRGB (8-bit) to CIE-Lab under D65.
pub fn rgb_to_lab(c: [u8; 3]) -> [f32; 3] {
    fn lin(v: u8) -> f32 {
        let v = v as f32 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f32) -> f32 {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    }
    let (r, g, b) = (lin(c[0]), lin(c[1]), lin(c[2]));
    let x = (0.4124 * r + 0.3576 * g + 0.1805 * b) / 0.95047;
    let y = 0.2126 * r + 0.7152 * g + 0.0722 * b;
    let z = (0.0193 * r + 0.1192 * g + 0.9505 * b) / 1.08883;
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_reference_points() {
        let w = rgb_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 0.05 && w[1].abs() < 0.05 && w[2].abs() < 0.05);
        let k = rgb_to_lab([0, 0, 0]);
        assert!(k[0].abs() < 1e-4);
        let r = rgb_to_lab([255, 0, 0]);
        assert!((r[0] - 53.24).abs() < 0.1 && (r[1] - 80.09).abs() < 0.2);
    }

    #[test]
    fn wrapped_sampling_crosses_seam() {
        let img = RgbImage::from_fn(4, 2, |x, _| [(x * 10) as u8, 0, 0]);
        let v = img.sample_wrapped(3.5, 0.0);
        assert!((v[0] - 15.0).abs() < 1e-4);
        let v = img.sample_wrapped(-0.5, 0.0);
        assert!((v[0] - 15.0).abs() < 1e-4);
    }

    #[test]
    fn bounded_sampling_rejects_outside() {
        let img = RgbImage::new(4, 4);
        assert!(img.sample_bounded(-0.1, 1.0).is_none());
        assert!(img.sample_bounded(3.0, 3.0).is_some());
    }
}
