//! Editing operations on environment mattes: flow scaling, similarity
//! transforms, and compositing onto new backgrounds.

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::matte::{compose, EnvironmentMatte};

/// Multiply every flow vector by `factor`; mask and attenuation are kept.
pub fn scale_flow(matte: &EnvironmentMatte, factor: f64) -> Result<EnvironmentMatte> {
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(MatteError::invalid(format!(
            "flow scale factor must be finite and >= 0, got {factor}"
        )));
    }
    let mut out = matte.clone();
    if factor != 1.0 {
        out.flow = matte.flow.scaled(factor, factor);
    }
    Ok(out)
}

/// Similarity transform about the image center: scale by `scale`, rotate by
/// `theta` radians (counter-clockwise in x-right, y-down coordinates, i.e.
/// clockwise on screen), then translate by `(tx, ty)` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub scale: f64,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity {
            tx: 0.0,
            ty: 0.0,
            theta: 0.0,
            scale: 1.0,
        }
    }
}

impl Similarity {
    pub fn translation(tx: f64, ty: f64) -> Self {
        Similarity {
            tx,
            ty,
            ..Default::default()
        }
    }

    pub fn rotation(theta: f64) -> Self {
        Similarity {
            theta,
            ..Default::default()
        }
    }

    pub fn scaling(scale: f64) -> Self {
        Similarity {
            scale,
            ..Default::default()
        }
    }

    fn is_pure_translation(&self) -> bool {
        self.theta == 0.0 && self.scale == 1.0
    }

    /// Rotate and scale a vector (no translation).
    fn apply_linear(&self, v: [f64; 2]) -> [f64; 2] {
        if self.is_pure_translation() {
            return v;
        }
        let (s, c) = self.theta.sin_cos();
        [
            self.scale * (c * v[0] - s * v[1]),
            self.scale * (s * v[0] + c * v[1]),
        ]
    }

    /// Source position of output pixel `(x, y)` for a `height x width` image.
    fn inverse(&self, x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
        if self.is_pure_translation() {
            return (x - self.tx, y - self.ty);
        }
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let dx = x - self.tx - cx;
        let dy = y - self.ty - cy;
        let (s, c) = self.theta.sin_cos();
        (
            (c * dx + s * dy) / self.scale + cx,
            (-s * dx + c * dy) / self.scale + cy,
        )
    }
}

/// Nearest pixel index of `coord`, or `None` when it falls outside `[0, n)`.
fn nearest(coord: f64, n: usize) -> Option<usize> {
    let r = (coord + 0.5).floor();
    (r >= 0.0 && r < n as f64).then_some(r as usize)
}

/// Bilinear flow sample using only valid corners; `None` if none are valid.
fn sample_valid_flow(flow: &FlowField, x: f64, y: f64) -> Option<[f64; 2]> {
    let (w, h) = (flow.width(), flow.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        ((x0 + 1).min(w - 1), y0, fx * (1.0 - fy)),
        (x0, (y0 + 1).min(h - 1), (1.0 - fx) * fy),
        ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1), fx * fy),
    ];
    let mut acc = [0.0; 2];
    let mut total = 0.0;
    for (cx, cy, wgt) in corners {
        if wgt > 0.0 && flow.is_valid(cx, cy) {
            let v = flow.get(cx, cy);
            acc[0] += wgt * v[0];
            acc[1] += wgt * v[1];
            total += wgt;
        }
    }
    if total == 0.0 {
        return None;
    }
    if total == 1.0 {
        return Some(acc);
    }
    Some([acc[0] / total, acc[1] / total])
}

/// Resample every plane of `matte` through the inverse of `transform`.
///
/// The mask uses nearest sampling, the other planes bilinear. With
/// `cotransform_flow` the flow vectors are also rotated and scaled so that
/// background correspondences move with the object. Pixels whose source lies
/// outside the image become background.
pub fn transform_matte(
    matte: &EnvironmentMatte,
    transform: &Similarity,
    cotransform_flow: bool,
) -> Result<EnvironmentMatte> {
    if !(transform.scale.is_finite() && transform.scale > 0.0) {
        return Err(MatteError::invalid("similarity scale must be positive"));
    }
    if ![transform.tx, transform.ty, transform.theta]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(MatteError::invalid("similarity parameters must be finite"));
    }
    matte.validate()?;
    let (h, w) = (matte.height(), matte.width());
    let mut out = EnvironmentMatte::empty(h, w);
    let mut color = matte
        .color_attenuation
        .as_ref()
        .map(|_| Image::filled(h, w, 3, 1.0));
    let mut specular = matte.specular.as_ref().map(|_| Image::new(h, w, 1));

    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = transform.inverse(x as f64, y as f64, h, w);
            let (Some(nx), Some(ny)) = (nearest(sx, w), nearest(sy, h)) else {
                continue;
            };
            let m = matte.mask.get(nx, ny, 0);
            out.mask.set(x, y, 0, m);
            out.attenuation
                .set(x, y, 0, matte.attenuation.sample(sx, sy, 0));
            if let (Some(dst), Some(src)) = (color.as_mut(), matte.color_attenuation.as_ref()) {
                for c in 0..3 {
                    dst.set(x, y, c, src.sample(sx, sy, c));
                }
            }
            if let (Some(dst), Some(src)) = (specular.as_mut(), matte.specular.as_ref()) {
                dst.set(x, y, 0, src.sample(sx, sy, 0));
            }
            if m > 0.0 {
                if let Some(v) = sample_valid_flow(&matte.flow, sx, sy) {
                    let v = if cotransform_flow {
                        transform.apply_linear(v)
                    } else {
                        v
                    };
                    out.flow.set(x, y, v);
                }
            }
        }
    }
    out.color_attenuation = color;
    out.specular = specular;
    Ok(out)
}

/// Composite `matte` onto a new background, resizing the background
/// bilinearly when its size differs from the matte.
pub fn composite_new(matte: &EnvironmentMatte, background: &Image) -> Result<Image> {
    if background.is_empty() {
        return Err(MatteError::invalid("background is empty"));
    }
    if background.height() == matte.height() && background.width() == matte.width() {
        compose(matte, background)
    } else {
        compose(
            matte,
            &background.resize_bilinear(matte.height(), matte.width()),
        )
    }
}
