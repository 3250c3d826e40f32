//! Gray-coded structured-light patterns and decoding of captured stacks into
//! ground-truth environment mattes.
//!
//! A stack holds an all-black and an all-white capture, one capture per
//! Gray-code bit plane along each axis (most significant first), and
//! optionally a mask capture of the object rendered white over black.
//! Bits are thresholded per pixel against the midpoint of that pixel's
//! black and white captures, so decoding is independent of the object's
//! attenuation.

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::matte::{compose, EnvironmentMatte};

/// Capture-space pixels whose mask capture exceeds this are foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Minimum white-minus-black contrast for a reliable bit decision.
pub const DECODE_FLOOR: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayCodeStack {
    /// Pattern-space width in pixels.
    pub width: usize,
    /// Pattern-space height in pixels.
    pub height: usize,
    pub black: Image,
    pub white: Image,
    pub x_planes: Vec<Image>,
    pub y_planes: Vec<Image>,
    /// Object rendered white in front of a black background. When absent
    /// the mask falls back to `white - black > MASK_THRESHOLD`.
    pub mask_capture: Option<Image>,
}

impl GrayCodeStack {
    /// Captures in canonical order: black, white, x planes, y planes.
    pub fn patterns(&self) -> impl Iterator<Item = &Image> {
        std::iter::once(&self.black)
            .chain(std::iter::once(&self.white))
            .chain(self.x_planes.iter())
            .chain(self.y_planes.iter())
    }

    pub fn pattern_count(&self) -> usize {
        2 + self.x_planes.len() + self.y_planes.len()
    }

    fn capture_size(&self) -> (usize, usize) {
        (self.black.height(), self.black.width())
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.capture_size();
        let all = self.patterns().chain(self.mask_capture.iter());
        if all
            .into_iter()
            .any(|img| img.height() != h || img.width() != w)
        {
            return Err(MatteError::shape("stack captures do not share dimensions"));
        }
        if self.x_planes.len() != plane_count(self.width)
            || self.y_planes.len() != plane_count(self.height)
        {
            return Err(MatteError::Codec(format!(
                "pattern space {}x{} needs {} x-planes and {} y-planes, stack has {} and {}",
                self.width,
                self.height,
                plane_count(self.width),
                plane_count(self.height),
                self.x_planes.len(),
                self.y_planes.len()
            )));
        }
        Ok(())
    }

    /// Apply `f` to every capture, including the mask capture.
    pub fn map_captures(&self, f: impl Fn(&Image) -> Image) -> GrayCodeStack {
        GrayCodeStack {
            width: self.width,
            height: self.height,
            black: f(&self.black),
            white: f(&self.white),
            x_planes: self.x_planes.iter().map(&f).collect(),
            y_planes: self.y_planes.iter().map(&f).collect(),
            mask_capture: self.mask_capture.as_ref().map(&f),
        }
    }
}

#[inline]
pub fn gray_encode(n: u64) -> u64 {
    n ^ (n >> 1)
}

#[inline]
pub fn gray_decode(mut g: u64) -> u64 {
    let mut n = g;
    while g > 1 {
        g >>= 1;
        n ^= g;
    }
    n
}

/// Number of bit planes needed to address `n` positions: `ceil(log2 n)`.
pub fn plane_count(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Ideal pattern stack for a `width` x `height` pattern space.
pub fn generate_patterns(width: usize, height: usize) -> Result<GrayCodeStack> {
    if width < 2 || height < 2 {
        return Err(MatteError::invalid(format!(
            "pattern space must be at least 2x2, got {width}x{height}"
        )));
    }
    let nx = plane_count(width);
    let ny = plane_count(height);
    let bit = |pos: usize, b: usize, planes: usize| {
        ((gray_encode(pos as u64) >> (planes - 1 - b)) & 1) as f64
    };
    Ok(GrayCodeStack {
        width,
        height,
        black: Image::new(height, width, 1),
        white: Image::filled(height, width, 1, 1.0),
        x_planes: (0..nx)
            .map(|b| Image::from_fn(height, width, 1, |x, _, _| bit(x, b, nx)))
            .collect(),
        y_planes: (0..ny)
            .map(|b| Image::from_fn(height, width, 1, |_, y, _| bit(y, b, ny)))
            .collect(),
        mask_capture: None,
    })
}

/// Simulate capturing `patterns` through `matte`: every pattern is composited
/// with the matte, and the mask capture is the hard mask itself.
pub fn render_stack(matte: &EnvironmentMatte, patterns: &GrayCodeStack) -> Result<GrayCodeStack> {
    let mut out = GrayCodeStack {
        width: patterns.width,
        height: patterns.height,
        black: compose(matte, &patterns.black)?,
        white: compose(matte, &patterns.white)?,
        x_planes: Vec::with_capacity(patterns.x_planes.len()),
        y_planes: Vec::with_capacity(patterns.y_planes.len()),
        mask_capture: Some(matte.mask.map(|m| if m > 0.5 { 1.0 } else { 0.0 })),
    };
    for p in &patterns.x_planes {
        out.x_planes.push(compose(matte, p)?);
    }
    for p in &patterns.y_planes {
        out.y_planes.push(compose(matte, p)?);
    }
    Ok(out)
}

/// Round every sample to the nearest 8-bit level.
pub fn quantize8(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Decode a captured stack into a hard-masked environment matte.
pub fn decode_stack(stack: &GrayCodeStack) -> Result<EnvironmentMatte> {
    stack.validate()?;
    let (h, w) = stack.capture_size();
    let black = stack.black.to_luma();
    let white = stack.white.to_luma();
    let mask_capture = stack.mask_capture.as_ref().map(Image::to_luma);
    let x_planes: Vec<Image> = stack.x_planes.iter().map(Image::to_luma).collect();
    let y_planes: Vec<Image> = stack.y_planes.iter().map(Image::to_luma).collect();

    let mut mask = Image::new(h, w, 1);
    let mut attenuation = Image::filled(h, w, 1, 1.0);
    let mut flow = FlowField::new(h, w);

    let read_code = |planes: &[Image], x: usize, y: usize, mid: f64| -> u64 {
        planes.iter().fold(0u64, |code, p| {
            (code << 1) | u64::from(p.get(x, y, 0) > mid)
        })
    };

    for y in 0..h {
        for x in 0..w {
            let b = black.get(x, y, 0);
            let wt = white.get(x, y, 0);
            let contrast = wt - b;
            let inside = match &mask_capture {
                Some(mc) => mc.get(x, y, 0) > MASK_THRESHOLD,
                None => contrast > MASK_THRESHOLD,
            };
            if !inside {
                continue;
            }
            mask.set(x, y, 0, 1.0);
            attenuation.set(x, y, 0, contrast.clamp(0.0, 1.0));
            if contrast < DECODE_FLOOR {
                continue;
            }
            let mid = 0.5 * (b + wt);
            let u = gray_decode(read_code(&x_planes, x, y, mid));
            let v = gray_decode(read_code(&y_planes, x, y, mid));
            if u as usize >= stack.width || v as usize >= stack.height {
                continue;
            }
            flow.set(x, y, [u as f64 - x as f64, v as f64 - y as f64]);
        }
    }
    Ok(EnvironmentMatte {
        mask,
        attenuation,
        flow,
        color_attenuation: None,
        specular: None,
    })
}
