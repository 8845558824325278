//! Planar RGB rasters with values in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{invalid, Result};

pub const CHANNELS: usize = 3;

/// An RGB image stored channel-major (`C x H x W`), matching the tensor
/// layout the encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut r = Self::zeros(height, width);
        for (c, v) in rgb.iter().enumerate() {
            r.plane_mut(c).fill(*v);
        }
        r
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(invalid!(
                "raster data has {} values, expected {}",
                data.len(),
                CHANNELS * height * width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copies the `w x h` window whose top-left corner is `(x, y)`.
    pub fn window(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Raster> {
        if x + w > self.width || y + h > self.height {
            return Err(invalid!(
                "window {w}x{h} at ({x},{y}) exceeds raster {}x{}",
                self.width,
                self.height
            ));
        }
        let mut out = Raster::zeros(h, w);
        for c in 0..CHANNELS {
            for row in 0..h {
                let src = (c * self.height + y + row) * self.width + x;
                let dst = (c * h + row) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for row in self.data.chunks_exact_mut(w) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (h, w) = (self.height, self.width);
        for c in 0..CHANNELS {
            let plane = self.plane_mut(c);
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }

    /// 2x2 box-mean downsample (integer halving of both sides).
    pub fn downsample_half(&self) -> Raster {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Raster::zeros(h, w);
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let s = self.get(c, 2 * y, 2 * x)
                        + self.get(c, 2 * y, 2 * x + 1)
                        + self.get(c, 2 * y + 1, 2 * x)
                        + self.get(c, 2 * y + 1, 2 * x + 1);
                    out.set(c, y, x, s * 0.25);
                }
            }
        }
        out
    }

    /// Per-pixel mean over channels.
    pub fn grayscale(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Writes a 16-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = ImageBuffer::<Rgb<u16>, _>::from_fn(self.width as u32, self.height as u32, |x, y| {
            let q = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16;
            Rgb([q(0), q(1), q(2)])
        });
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Raster> {
        let img = image::open(path)?.into_rgb16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut r = Raster::zeros(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                r.set(c, y as usize, x as usize, px.0[c] as f32 / 65535.0);
            }
        }
        Ok(r)
    }
}
