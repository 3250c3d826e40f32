//! The environment matte and the forward compositing model.
//!
//! A composited pixel is
//!
//! ```text
//! C = (1 - m) B + m ρ M(T, p + F)
//! ```
//!
//! where `M` is bilinear sampling of the background `T` (the same image as
//! `B` here) at the refracted position. Classical alpha matting is the
//! special case `F = 0`, `ρ = 1`; the ambient term of general
//! environment matting is not modeled. The colored extension
//! replaces `ρ` with a per-channel attenuation `R` and adds a gray specular
//! term `S`.

use rayon::prelude::*;

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMatte {
    /// Object mask, `{0,1}` or soft `[0,1]`.
    pub mask: Image,
    /// Scalar light transmission `ρ` in `[0,1]`.
    pub attenuation: Image,
    pub flow: FlowField,
    /// Optional per-channel attenuation `R` (3 channels).
    pub color_attenuation: Option<Image>,
    /// Optional specular highlight `S` (1 channel, added to every channel).
    pub specular: Option<Image>,
}

impl EnvironmentMatte {
    pub fn new(mask: Image, attenuation: Image, flow: FlowField) -> Result<Self> {
        let matte = EnvironmentMatte {
            mask,
            attenuation,
            flow,
            color_attenuation: None,
            specular: None,
        };
        matte.validate()?;
        Ok(matte)
    }

    /// Matte with no object: mask 0, attenuation 1, invalid flow.
    pub fn empty(height: usize, width: usize) -> Self {
        EnvironmentMatte {
            mask: Image::new(height, width, 1),
            attenuation: Image::filled(height, width, 1, 1.0),
            flow: FlowField::new(height, width),
            color_attenuation: None,
            specular: None,
        }
    }

    pub fn with_color(mut self, color_attenuation: Image, specular: Image) -> Result<Self> {
        self.color_attenuation = Some(color_attenuation);
        self.specular = Some(specular);
        self.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let plane_ok = |img: &Image, channels: usize| {
            img.height() == h && img.width() == w && img.channels() == channels
        };
        if !plane_ok(&self.mask, 1) {
            return Err(MatteError::shape("mask must be a single-channel plane"));
        }
        if !plane_ok(&self.attenuation, 1) {
            return Err(MatteError::shape("attenuation does not match mask"));
        }
        if self.flow.height() != h || self.flow.width() != w {
            return Err(MatteError::shape("flow does not match mask"));
        }
        if let Some(r) = &self.color_attenuation {
            if !plane_ok(r, 3) {
                return Err(MatteError::shape(
                    "color attenuation must be HxWx3 matching the mask",
                ));
            }
        }
        if let Some(s) = &self.specular {
            if !plane_ok(s, 1) {
                return Err(MatteError::shape(
                    "specular must be HxWx1 matching the mask",
                ));
            }
        }
        Ok(())
    }

    /// Threshold the mask at 0.5 and make flow validity follow it.
    pub fn hardened(&self) -> EnvironmentMatte {
        let mut out = self.clone();
        out.mask = self.mask.map(|m| if m > 0.5 { 1.0 } else { 0.0 });
        out.flow.restrict_to(&out.mask);
        out
    }
}

/// Three-valued pixel label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Trimap {
    pub const BACKGROUND: u8 = 0;
    pub const UNKNOWN: u8 = 1;
    pub const FOREGROUND: u8 = 2;

    pub fn new(height: usize, width: usize) -> Self {
        Trimap {
            height,
            width,
            labels: vec![Self::BACKGROUND; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(MatteError::shape("trimap label count does not match size"));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 2) {
            return Err(MatteError::invalid(format!(
                "trimap label {v} outside {{0,1,2}}"
            )));
        }
        Ok(Trimap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        debug_assert!(label <= 2);
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn check_background(matte: &EnvironmentMatte, background: &Image) -> Result<()> {
    matte.validate()?;
    if matte.height() != background.height() || matte.width() != background.width() {
        return Err(MatteError::shape(format!(
            "matte is {}x{} but background is {}x{}",
            matte.height(),
            matte.width(),
            background.height(),
            background.width()
        )));
    }
    if background.channels() != 1 && background.channels() != 3 {
        return Err(MatteError::shape("background must have 1 or 3 channels"));
    }
    Ok(())
}

/// Composite `matte` over `background`. Output has the background's channel
/// count and is clamped to `[0,1]`. Where the mask is 0 the background is
/// returned bit-exactly.
pub fn compose(matte: &EnvironmentMatte, background: &Image) -> Result<Image> {
    check_background(matte, background)?;
    Ok(composite_rows(
        matte,
        background,
        |_, _, _, rho| rho,
        |_, _| 0.0,
    ))
}

/// Composite with per-channel attenuation `R` and additive specular `S`.
pub fn compose_colored(matte: &EnvironmentMatte, background: &Image) -> Result<Image> {
    let (Some(r), Some(s)) = (&matte.color_attenuation, &matte.specular) else {
        return Err(MatteError::invalid(
            "colored compositing needs both color attenuation and specular planes",
        ));
    };
    check_background(matte, background)?;
    if background.channels() != 3 {
        return Err(MatteError::shape(
            "colored compositing needs a 3-channel background",
        ));
    }
    Ok(composite_rows(
        matte,
        background,
        |x, y, c, _| r.get(x, y, c),
        |x, y| s.get(x, y, 0),
    ))
}

fn composite_rows(
    matte: &EnvironmentMatte,
    background: &Image,
    attenuation: impl Fn(usize, usize, usize, f64) -> f64 + Sync,
    specular: impl Fn(usize, usize) -> f64 + Sync,
) -> Image {
    let (h, w, ch) = (
        background.height(),
        background.width(),
        background.channels(),
    );
    let mut out = Image::new(h, w, ch);
    out.data_mut()
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let m = matte.mask.get(x, y, 0);
                let px = &mut row[x * ch..(x + 1) * ch];
                if m == 0.0 {
                    px.copy_from_slice(background.pixel(x, y));
                    continue;
                }
                let rho = matte.attenuation.get(x, y, 0);
                let [dx, dy] = matte.flow.get(x, y);
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                let spec = specular(x, y);
                for (c, v) in px.iter_mut().enumerate() {
                    let b = background.get(x, y, c);
                    let refracted = background.sample(sx, sy, c);
                    let a = attenuation(x, y, c, rho);
                    *v = ((1.0 - m) * b + m * a * refracted + spec).clamp(0.0, 1.0);
                }
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |x, y, c| {
            0.5 + 0.4 * ((x as f64 * 0.9 + c as f64).sin() * (y as f64 * 0.7).cos())
        })
    }

    fn full_matte(h: usize, w: usize, rho: f64, flow: FlowField) -> EnvironmentMatte {
        EnvironmentMatte::new(
            Image::filled(h, w, 1, 1.0),
            Image::filled(h, w, 1, rho),
            flow,
        )
        .unwrap()
    }

    #[test]
    fn empty_mask_returns_background() {
        let bg = textured(6, 7);
        let out = compose(&EnvironmentMatte::empty(6, 7), &bg).unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn identity_matte_returns_background() {
        let bg = textured(6, 7);
        let out = compose(
            &full_matte(6, 7, 1.0, FlowField::constant(6, 7, 0.0, 0.0)),
            &bg,
        )
        .unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn half_attenuation() {
        let bg = Image::filled(4, 4, 3, 0.8);
        let out = compose(
            &full_matte(4, 4, 0.5, FlowField::constant(4, 4, 0.0, 0.0)),
            &bg,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch() {
        let bg = Image::filled(4, 5, 3, 0.8);
        assert!(matches!(
            compose(&EnvironmentMatte::empty(4, 4), &bg),
            Err(MatteError::Shape(_))
        ));
    }

    #[test]
    fn grayscale_background_broadcasts() {
        let bg = Image::filled(3, 3, 1, 0.6);
        let out = compose(
            &full_matte(3, 3, 0.5, FlowField::constant(3, 3, 1.0, 0.0)),
            &bg,
        )
        .unwrap();
        assert_eq!(out.channels(), 1);
        assert!((out.get(1, 1, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn colored_reduces_to_scalar() {
        let bg = textured(5, 5);
        let flow = FlowField::from_fn(5, 5, |x, y| [0.3 * x as f64 - 0.6, 0.25 * y as f64 - 0.5]);
        let matte = full_matte(5, 5, 0.7, flow);
        let plain = compose(&matte, &bg).unwrap();
        let white = matte
            .clone()
            .with_color(Image::filled(5, 5, 3, 1.0), Image::new(5, 5, 1))
            .unwrap();
        let ones = full_matte(5, 5, 1.0, white.flow.clone());
        assert_eq!(
            compose_colored(&white, &bg).unwrap(),
            compose(&ones, &bg).unwrap()
        );
        let gray = matte
            .clone()
            .with_color(Image::filled(5, 5, 3, 0.7), Image::new(5, 5, 1))
            .unwrap();
        assert_eq!(compose_colored(&gray, &bg).unwrap(), plain);
    }

    #[test]
    fn colored_channel_attenuation_and_specular_clamp() {
        let bg = Image::filled(2, 2, 3, 1.0);
        let red = full_matte(2, 2, 1.0, FlowField::constant(2, 2, 0.0, 0.0))
            .with_color(
                Image::from_fn(2, 2, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 }),
                Image::new(2, 2, 1),
            )
            .unwrap();
        let out = compose_colored(&red, &bg).unwrap();
        assert_eq!(out.pixel(1, 1), &[1.0, 0.0, 0.0]);

        let bg = Image::filled(2, 2, 3, 0.9);
        let shiny = full_matte(2, 2, 1.0, FlowField::constant(2, 2, 0.0, 0.0))
            .with_color(Image::filled(2, 2, 3, 1.0), Image::filled(2, 2, 1, 0.2))
            .unwrap();
        let out = compose_colored(&shiny, &bg).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn colored_requires_planes() {
        let bg = Image::filled(2, 2, 3, 1.0);
        assert!(matches!(
            compose_colored(&EnvironmentMatte::empty(2, 2), &bg),
            Err(MatteError::InvalidArgument(_))
        ));
    }

    #[test]
    fn trimap_rejects_bad_labels() {
        assert!(Trimap::from_labels(1, 2, vec![0, 3]).is_err());
        assert!(Trimap::from_labels(1, 2, vec![0, 2]).is_ok());
    }
}
