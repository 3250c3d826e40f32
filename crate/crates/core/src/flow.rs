//! Refractive flow fields: per-pixel offsets from a foreground pixel to its
//! correspondence on the background.

use std::f64::consts::PI;

use crate::error::{MatteError, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl FlowField {
    /// All-invalid zero field.
    pub fn new(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![[0.0; 2]; height * width],
            valid: vec![false; height * width],
        }
    }

    /// Uniform field, valid everywhere.
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        FlowField {
            height,
            width,
            data: vec![[dx, dy]; height * width],
            valid: vec![true; height * width],
        }
    }

    /// Field from `f(x, y)`, valid everywhere.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 2],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        FlowField {
            height,
            width,
            data,
            valid: vec![true; height * width],
        }
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        data: Vec<[f64; 2]>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if data.len() != height * width || valid.len() != height * width {
            return Err(MatteError::shape(format!(
                "flow buffers of {} / {} entries for {}x{}",
                data.len(),
                valid.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(MatteError::invalid("non-finite flow vector"));
        }
        let mut flow = FlowField {
            height,
            width,
            data,
            valid,
        };
        flow.zero_invalid();
        Ok(flow)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 2]) {
        let i = y * self.width + x;
        self.data[i] = v;
        self.valid[i] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.data[i] = [0.0; 2];
        self.valid[i] = false;
    }

    /// Make validity follow `mask > 0.5`, zeroing vectors that become invalid.
    pub fn restrict_to(&mut self, mask: &Image) {
        for (i, (&m, v)) in mask.data().iter().zip(self.valid.iter_mut()).enumerate() {
            *v = m > 0.5;
            if !*v {
                self.data[i] = [0.0; 2];
            }
        }
    }

    fn zero_invalid(&mut self) {
        for (d, &v) in self.data.iter_mut().zip(&self.valid) {
            if !v {
                *d = [0.0; 2];
            }
        }
    }

    /// Multiply every vector by `(sx, sy)`.
    pub fn scaled(&self, sx: f64, sy: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| [v[0] * sx, v[1] * sy]).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// One component as a single-channel plane.
    pub fn component(&self, axis: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |x, y, _| self.get(x, y)[axis])
    }

    /// Bilinear sample of the vector at a continuous position (border clamped).
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let cx = crate::image::Cell::locate(x, self.width);
        let cy = crate::image::Cell::locate(y, self.height);
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            let v00 = self.get(cx.lo, cy.lo)[axis];
            let v10 = self.get(cx.hi, cy.lo)[axis];
            let v01 = self.get(cx.lo, cy.hi)[axis];
            let v11 = self.get(cx.hi, cy.hi)[axis];
            let top = (1.0 - cx.frac) * v00 + cx.frac * v10;
            let bottom = (1.0 - cx.frac) * v01 + cx.frac * v11;
            *o = (1.0 - cy.frac) * top + cy.frac * bottom;
        }
        out
    }

    /// Resample to a new grid with pixel-center alignment. Vector components
    /// are multiplied by the per-axis size ratio so offsets stay expressed in
    /// pixels of the new grid. The result is valid everywhere.
    pub fn resample(&self, height: usize, width: usize) -> FlowField {
        let rx = width as f64 / self.width as f64;
        let ry = height as f64 / self.height as f64;
        FlowField::from_fn(height, width, |x, y| {
            let v = self.sample((x as f64 + 0.5) / rx - 0.5, (y as f64 + 0.5) / ry - 0.5);
            [v[0] * rx, v[1] * ry]
        })
    }

    pub fn flip_horizontal(&self) -> FlowField {
        let w = self.width;
        self.remap(|x, y| (w - 1 - x, y), |v| [-v[0], v[1]])
    }

    pub fn flip_vertical(&self) -> FlowField {
        let h = self.height;
        self.remap(|x, y| (x, h - 1 - y), |v| [v[0], -v[1]])
    }

    fn remap(
        &self,
        src: impl Fn(usize, usize) -> (usize, usize),
        vec: impl Fn([f64; 2]) -> [f64; 2],
    ) -> FlowField {
        let mut out = FlowField::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = src(x, y);
                if self.is_valid(sx, sy) {
                    out.set(x, y, vec(self.get(sx, sy)));
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, height: usize, width: usize) -> Result<FlowField> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(MatteError::invalid("flow crop exceeds field"));
        }
        let mut out = FlowField::new(height, width);
        for y in 0..height {
            for x in 0..width {
                if self.is_valid(x0 + x, y0 + y) {
                    out.set(x, y, self.get(x0 + x, y0 + y));
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear upsampling by an integer factor; vector values are multiplied by
/// the factor.
pub fn upsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    if factor == 0 {
        return Err(MatteError::invalid("upsampling factor must be positive"));
    }
    Ok(flow.resample(flow.height * factor, flow.width * factor))
}

/// Color-wheel rendering: hue from the vector angle, saturation from
/// magnitude over `max_magnitude` (saturating at 1), value 1. Invalid pixels
/// are white. `None` normalizes by the largest valid magnitude.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> Result<Image> {
    let max = match max_magnitude {
        Some(m) if !(m.is_finite() && m > 0.0) => {
            return Err(MatteError::invalid(format!(
                "max_magnitude must be positive, got {m}"
            )))
        }
        Some(m) => m,
        None => {
            let m = flow.max_magnitude();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let mut out = Image::filled(flow.height, flow.width, 3, 1.0);
    for y in 0..flow.height {
        for x in 0..flow.width {
            if !flow.is_valid(x, y) {
                continue;
            }
            let [dx, dy] = flow.get(x, y);
            let sat = (dx.hypot(dy) / max).min(1.0);
            let hue = dy.atan2(dx).rem_euclid(2.0 * PI);
            let rgb = hsv_to_rgb(hue, sat, 1.0);
            for (c, v) in rgb.into_iter().enumerate() {
                out.set(x, y, c, v);
            }
        }
    }
    Ok(out)
}

/// `hue` in radians.
pub(crate) fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h6 = (hue / (PI / 3.0)).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = val * (1.0 - sat);
    let q = val * (1.0 - sat * f);
    let t = val * (1.0 - sat * (1.0 - f));
    match sector as u32 {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    }
}
