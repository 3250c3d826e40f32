//! Raster type shared by backgrounds, composites, patterns and scalar planes.
//!
//! Pixel centers sit on integer coordinates with `x` the column and `y` the
//! row. Samples are stored row-major and interleaved by channel.

use crate::error::{MatteError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Interpolation cell along one axis: lower index, upper index, fraction
/// toward the upper index, and whether the coordinate was inside the
/// differentiable range.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Cell {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub inside: bool,
}

impl Cell {
    /// Clamp `coord` to `[0, n-1]` and locate the cell to its right. At the
    /// last sample the left cell is used with `frac = 1`.
    #[inline]
    pub fn locate(coord: f64, n: usize) -> Cell {
        if n == 1 {
            return Cell {
                lo: 0,
                hi: 0,
                frac: 0.0,
                inside: false,
            };
        }
        let max = (n - 1) as f64;
        let inside = coord >= 0.0 && coord < max;
        let c = coord.clamp(0.0, max);
        let mut lo = c.floor() as usize;
        if lo >= n - 1 {
            lo = n - 2;
        }
        Cell {
            lo,
            hi: lo + 1,
            frac: c - lo as f64,
            inside,
        }
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(MatteError::invalid("image must have at least one channel"));
        }
        if data.len() != height * width * channels {
            return Err(MatteError::shape(format!(
                "{} samples supplied for a {}x{}x{} image",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(MatteError::invalid(format!("non-finite sample {v}")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Build an image by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Samples of one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channel `c` when the image has it, channel 0 otherwise (grayscale
    /// broadcast).
    #[inline]
    pub fn get_broadcast(&self, x: usize, y: usize, c: usize) -> f64 {
        let c = if self.channels == 1 { 0 } else { c };
        self.get(x, y, c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Extract channel `c` as a single-channel plane.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |x, y, _| self.get(x, y, c))
    }

    /// Repeat a single-channel plane into `channels` channels.
    pub fn broadcast(&self, channels: usize) -> Image {
        Image::from_fn(self.height, self.width, channels, |x, y, c| {
            self.get_broadcast(x, y, c)
        })
    }

    /// Rec. 601 luma for 3-channel images; single-channel images are
    /// returned as-is.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 1, |x, y, _| {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        })
    }

    /// Bilinear interpolation of channel `c` at a continuous position,
    /// with out-of-range coordinates clamped to the border.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let cx = Cell::locate(x, self.width);
        let cy = Cell::locate(y, self.height);
        let v00 = self.get(cx.lo, cy.lo, c);
        let v10 = self.get(cx.hi, cy.lo, c);
        let v01 = self.get(cx.lo, cy.hi, c);
        let v11 = self.get(cx.hi, cy.hi, c);
        let top = (1.0 - cx.frac) * v00 + cx.frac * v10;
        let bottom = (1.0 - cx.frac) * v01 + cx.frac * v11;
        (1.0 - cy.frac) * top + cy.frac * bottom
    }

    /// Like [`Image::sample`], also returning the partial derivatives with
    /// respect to `x` and `y`. On lattice lines the right (lower) cell is
    /// used; clamped coordinates have zero derivative.
    #[inline]
    pub fn sample_with_grad(&self, x: f64, y: f64, c: usize) -> (f64, f64, f64) {
        let cx = Cell::locate(x, self.width);
        let cy = Cell::locate(y, self.height);
        let v00 = self.get(cx.lo, cy.lo, c);
        let v10 = self.get(cx.hi, cy.lo, c);
        let v01 = self.get(cx.lo, cy.hi, c);
        let v11 = self.get(cx.hi, cy.hi, c);
        let top = (1.0 - cx.frac) * v00 + cx.frac * v10;
        let bottom = (1.0 - cx.frac) * v01 + cx.frac * v11;
        let value = (1.0 - cy.frac) * top + cy.frac * bottom;
        let dx = if cx.inside {
            (1.0 - cy.frac) * (v10 - v00) + cy.frac * (v11 - v01)
        } else {
            0.0
        };
        let dy = if cy.inside { bottom - top } else { 0.0 };
        (value, dx, dy)
    }

    /// Checked per-channel bilinear sample.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(MatteError::invalid("cannot sample an empty image"));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(MatteError::invalid(format!(
                "non-finite sample coordinate ({x}, {y})"
            )));
        }
        Ok((0..self.channels).map(|c| self.sample(x, y, c)).collect())
    }

    /// Resample to a new size with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(height, width, self.channels, |x, y, c| {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            self.sample(src_x, src_y, c)
        })
    }

    /// 2x2 box-filter reduction; an odd trailing row or column is dropped.
    pub fn downsample_half(&self) -> Image {
        let h = (self.height / 2).max(1);
        let w = (self.width / 2).max(1);
        Image::from_fn(h, w, self.channels, |x, y, c| {
            let x0 = (2 * x).min(self.width - 1);
            let x1 = (2 * x + 1).min(self.width - 1);
            let y0 = (2 * y).min(self.height - 1);
            let y1 = (2 * y + 1).min(self.height - 1);
            0.25 * (self.get(x0, y0, c)
                + self.get(x1, y0, c)
                + self.get(x0, y1, c)
                + self.get(x1, y1, c))
        })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |x, y, c| {
            self.get(self.width - 1 - x, y, c)
        })
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |x, y, c| {
            self.get(x, self.height - 1 - y, c)
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, height: usize, width: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(MatteError::invalid(format!(
                "crop {}x{} at ({x0},{y0}) exceeds {}x{} image",
                height, width, self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, self.channels, |x, y, c| {
            self.get(x0 + x, y0 + y, c)
        }))
    }
}
