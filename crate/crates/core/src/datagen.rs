//! Trimap generation, seeded data augmentation, and analytic test mattes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::matte::{EnvironmentMatte, Trimap};

/// How the known-foreground region of a trimap is derived from the mask.
#[derive(Debug, Clone, PartialEq)]
pub enum TrimapMode {
    /// Erode with a square structuring element of this radius.
    Fixed { kernel: usize },
    /// Erode with a radius drawn uniformly from `kernel_range` (inclusive),
    /// then cut up to `crop_fraction` of the eroded region's extent from one
    /// random side.
    Random {
        kernel_range: (usize, usize),
        crop_fraction: f64,
        seed: u64,
    },
}

impl TrimapMode {
    /// Evaluation-time setting: fixed radius 10.
    pub fn evaluation() -> Self {
        TrimapMode::Fixed { kernel: 10 }
    }

    /// Training-time setting: radius in [5, 15], crop up to 20%.
    pub fn random(seed: u64) -> Self {
        TrimapMode::Random {
            kernel_range: (5, 15),
            crop_fraction: 0.2,
            seed,
        }
    }
}

fn binary(mask: &Image) -> Vec<bool> {
    mask.data().iter().map(|&m| m > 0.5).collect()
}

/// Square erosion; the window is clipped at the image border.
pub fn erode(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(width - 1);
            rows[y * width + x] = (lo..=hi).all(|xx| mask[y * width + xx]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).all(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// Square dilation; the window is clipped at the image border.
pub fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let inverted: Vec<bool> = mask.iter().map(|&m| !m).collect();
    erode(&inverted, height, width, radius)
        .into_iter()
        .map(|m| !m)
        .collect()
}

/// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
fn bbox(mask: &[bool], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b
}

/// Trimap from an object mask: foreground is the eroded (and in random mode
/// cropped) mask, unknown is the mask's tight bounding box minus the
/// foreground, background is everything else.
pub fn gen_trimap(mask: &Image, mode: &TrimapMode) -> Trimap {
    let (h, w) = (mask.height(), mask.width());
    let m = binary(mask);
    let mut trimap = Trimap::new(h, w);
    let Some((bx0, by0, bx1, by1)) = bbox(&m, w) else {
        return trimap;
    };
    let foreground = match mode {
        TrimapMode::Fixed { kernel } => erode(&m, h, w, *kernel),
        TrimapMode::Random {
            kernel_range,
            crop_fraction,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let (lo, hi) = (
                kernel_range.0.min(kernel_range.1),
                kernel_range.0.max(kernel_range.1),
            );
            let radius = rng.gen_range(lo..=hi);
            let mut fg = erode(&m, h, w, radius);
            let side = rng.gen_range(0..4u8);
            let fraction = rng.gen_range(0.0..=crop_fraction.max(0.0));
            if let Some((x0, y0, x1, y1)) = bbox(&fg, w) {
                let cut_x = ((x1 - x0 + 1) as f64 * fraction).floor() as usize;
                let cut_y = ((y1 - y0 + 1) as f64 * fraction).floor() as usize;
                for (i, f) in fg.iter_mut().enumerate() {
                    let (x, y) = (i % w, i / w);
                    let cut = match side {
                        0 => x < x0 + cut_x,
                        1 => x + cut_x > x1,
                        2 => y < y0 + cut_y,
                        _ => y + cut_y > y1,
                    };
                    if cut {
                        *f = false;
                    }
                }
            }
            fg
        }
    };
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            trimap.set(x, y, Trimap::UNKNOWN);
        }
    }
    for (i, &f) in foreground.iter().enumerate() {
        if f {
            trimap.set(i % w, i / w, Trimap::FOREGROUND);
        }
    }
    trimap
}

/// Analytic flow families for oracle mattes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestMatteKind {
    /// `F = k (p − c)`; negative `k` behaves like a magnifying lens.
    Radial {
        k: f64,
    },
    /// `F = (a sin(2πx/λ), a sin(2πy/λ))`.
    Ripple {
        amplitude: f64,
        wavelength: f64,
    },
    Constant {
        dx: f64,
        dy: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestMatteSpec {
    pub kind: TestMatteKind,
    pub height: usize,
    pub width: usize,
    /// Disk radius of the mask; `None` covers the whole frame.
    pub radius: Option<f64>,
    /// Disk and radial-flow center; `None` is the image center.
    pub center: Option<(f64, f64)>,
    pub rho: f64,
}

impl TestMatteSpec {
    pub fn new(kind: TestMatteKind, height: usize, width: usize) -> Self {
        TestMatteSpec {
            kind,
            height,
            width,
            radius: None,
            center: None,
            rho: 1.0,
        }
    }
}

/// Build an analytic test matte.
pub fn gen_test_matte(spec: &TestMatteSpec) -> Result<EnvironmentMatte> {
    if spec.height == 0 || spec.width == 0 {
        return Err(MatteError::invalid("test matte must be non-empty"));
    }
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(MatteError::invalid("rho must lie in [0, 1]"));
    }
    if let TestMatteKind::Ripple { wavelength, .. } = spec.kind {
        if wavelength.is_nan() || wavelength <= 0.0 {
            return Err(MatteError::invalid("ripple wavelength must be positive"));
        }
    }
    let (h, w) = (spec.height, spec.width);
    let (cx, cy) = spec
        .center
        .unwrap_or(((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0));
    let mask = Image::from_fn(h, w, 1, |x, y, _| match spec.radius {
        None => 1.0,
        Some(r) => {
            if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                1.0
            } else {
                0.0
            }
        }
    });
    let mut flow = FlowField::from_fn(h, w, |x, y| {
        let (x, y) = (x as f64, y as f64);
        match spec.kind {
            TestMatteKind::Radial { k } => [k * (x - cx), k * (y - cy)],
            TestMatteKind::Ripple {
                amplitude,
                wavelength,
            } => [
                amplitude * (2.0 * PI * x / wavelength).sin(),
                amplitude * (2.0 * PI * y / wavelength).sin(),
            ],
            TestMatteKind::Constant { dx, dy } => [dx, dy],
        }
    });
    flow.restrict_to(&mask);
    let attenuation = Image::from_fn(h, w, 1, |x, y, _| {
        if mask.get(x, y, 0) > 0.5 {
            spec.rho
        } else {
            1.0
        }
    });
    EnvironmentMatte::new(mask, attenuation, flow)
}

/// Augmentation ranges. Color deltas and noise are symmetric around zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub scale_range: (f64, f64),
    pub noise: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub flip_probability: f64,
    pub crop: usize,
    pub boundary_blur_radius: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            scale_range: (0.875, 1.05),
            noise: 0.05,
            hflip: true,
            vflip: true,
            flip_probability: 0.5,
            crop: 448,
            boundary_blur_radius: 2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Settings for the coarse stage (448 crops).
    pub fn coarse(seed: u64) -> Self {
        AugmentConfig {
            seed,
            ..Self::default()
        }
    }

    /// Settings for the refinement stage (384 crops).
    pub fn refine(seed: u64) -> Self {
        AugmentConfig {
            crop: 384,
            seed,
            ..Self::default()
        }
    }

    /// No-op configuration for an image of `size` pixels square.
    pub fn identity(size: usize) -> Self {
        AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            scale_range: (1.0, 1.0),
            noise: 0.0,
            hflip: false,
            vflip: false,
            flip_probability: 0.0,
            crop: size,
            boundary_blur_radius: 0,
            seed: 0,
        }
    }
}

/// Concrete draws for one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub scale: f64,
    pub scaled_height: usize,
    pub scaled_width: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop: usize,
    pub noise_seed: u64,
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize) -> Result<AugmentParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let brightness = symmetric(&mut rng, cfg.brightness);
        let contrast = symmetric(&mut rng, cfg.contrast);
        let saturation = symmetric(&mut rng, cfg.saturation);
        let (lo, hi) = cfg.scale_range;
        if lo.is_nan() || lo <= 0.0 || hi < lo {
            return Err(MatteError::invalid(
                "scale range must be positive and ordered",
            ));
        }
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let scaled_height = ((height as f64 * scale).round() as usize).max(1);
        let scaled_width = ((width as f64 * scale).round() as usize).max(1);
        let hflip = cfg.hflip && rng.gen_bool(cfg.flip_probability.clamp(0.0, 1.0));
        let vflip = cfg.vflip && rng.gen_bool(cfg.flip_probability.clamp(0.0, 1.0));
        if cfg.crop == 0 || cfg.crop > scaled_height || cfg.crop > scaled_width {
            return Err(MatteError::invalid(format!(
                "crop {} does not fit a {}x{} image",
                cfg.crop, scaled_height, scaled_width
            )));
        }
        let crop_x = rng.gen_range(0..=scaled_width - cfg.crop);
        let crop_y = rng.gen_range(0..=scaled_height - cfg.crop);
        let noise_seed = rng.gen();
        Ok(AugmentParams {
            brightness,
            contrast,
            saturation,
            scale,
            scaled_height,
            scaled_width,
            hflip,
            vflip,
            crop_x,
            crop_y,
            crop: cfg.crop,
            noise_seed,
        })
    }
}

fn resize_nearest(img: &Image, height: usize, width: usize) -> Image {
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    Image::from_fn(height, width, img.channels(), |x, y, c| {
        let src_x = (((x as f64 + 0.5) * sx).floor() as usize).min(img.width() - 1);
        let src_y = (((y as f64 + 0.5) * sy).floor() as usize).min(img.height() - 1);
        img.get(src_x, src_y, c)
    })
}

/// Brightness, contrast and saturation jitter with factors `1 + delta`.
pub fn color_jitter(img: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let b = 1.0 + brightness;
    let mut out = img.map(|v| (v * b).clamp(0.0, 1.0));
    let mean = out.to_luma().mean();
    let c = 1.0 + contrast;
    out = out.map(|v| (v * c + mean * (1.0 - c)).clamp(0.0, 1.0));
    if img.channels() == 3 {
        let s = 1.0 + saturation;
        let luma = out.to_luma();
        out = Image::from_fn(out.height(), out.width(), 3, |x, y, ch| {
            let l = luma.get(x, y, 0);
            (out.get(x, y, ch) * s + l * (1.0 - s)).clamp(0.0, 1.0)
        });
    }
    out
}

/// Uniform per-sample noise in `[-amplitude, amplitude]`, clamped to [0,1].
pub fn add_noise(img: &Image, amplitude: f64, seed: u64) -> Image {
    if amplitude <= 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + rng.gen_range(-amplitude..=amplitude)).clamp(0.0, 1.0);
    }
    out
}

/// Gaussian blur (σ = radius / 2) restricted to pixels within `radius` of
/// a mask edge.
pub fn blur_boundary(img: &Image, mask: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let m = binary(mask);
    let edges: Vec<bool> = (0..h * w)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            (x + 1 < w && m[i] != m[i + 1]) || (y + 1 < h && m[i] != m[i + w])
        })
        .collect();
    let band = dilate(&edges, h, w, radius);
    let sigma = radius as f64 / 2.0;
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            if !band[y * w + x] {
                continue;
            }
            for c in 0..img.channels() {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (ky, kvy) in kernel.iter().enumerate() {
                    let yy = y as isize + ky as isize - r;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for (kx, kvx) in kernel.iter().enumerate() {
                        let xx = x as isize + kx as isize - r;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let k = kvx * kvy;
                        acc += k * img.get(xx as usize, yy as usize, c);
                        wsum += k;
                    }
                }
                out.set(x, y, c, acc / wsum);
            }
        }
    }
    out
}

/// Scaling, flips and crop of `params` applied to a raster.
pub fn apply_geometry(img: &Image, params: &AugmentParams) -> Result<Image> {
    let mut out = img.resize_bilinear(params.scaled_height, params.scaled_width);
    if params.hflip {
        out = out.flip_horizontal();
    }
    if params.vflip {
        out = out.flip_vertical();
    }
    out.crop(params.crop_x, params.crop_y, params.crop, params.crop)
}

fn matte_geometry(matte: &EnvironmentMatte, params: &AugmentParams) -> Result<EnvironmentMatte> {
    let (h, w) = (params.scaled_height, params.scaled_width);
    let mut mask = resize_nearest(&matte.mask, h, w);
    let mut attenuation = matte.attenuation.resize_bilinear(h, w);
    let mut flow = if (h, w) == (matte.height(), matte.width()) {
        matte.flow.clone()
    } else {
        let mut f = matte.flow.resample(h, w);
        f.restrict_to(&mask);
        f
    };
    let mut color = matte
        .color_attenuation
        .as_ref()
        .map(|r| r.resize_bilinear(h, w));
    let mut specular = matte.specular.as_ref().map(|s| s.resize_bilinear(h, w));
    let flips: [Flip; 2] = [
        (
            params.hflip,
            Image::flip_horizontal,
            FlowField::flip_horizontal,
        ),
        (params.vflip, Image::flip_vertical, FlowField::flip_vertical),
    ];
    for (on, flip_img, flip_flow) in flips {
        if on {
            mask = flip_img(&mask);
            attenuation = flip_img(&attenuation);
            flow = flip_flow(&flow);
            color = color.map(|r| flip_img(&r));
            specular = specular.map(|s| flip_img(&s));
        }
    }
    let (x0, y0, c) = (params.crop_x, params.crop_y, params.crop);
    Ok(EnvironmentMatte {
        mask: mask.crop(x0, y0, c, c)?,
        attenuation: attenuation.crop(x0, y0, c, c)?,
        flow: flow.crop(x0, y0, c, c)?,
        color_attenuation: color.map(|r| r.crop(x0, y0, c, c)).transpose()?,
        specular: specular.map(|s| s.crop(x0, y0, c, c)).transpose()?,
    })
}

/// Whether to flip, and how to flip images and flows.
type Flip = (bool, fn(&Image) -> Image, fn(&FlowField) -> FlowField);

/// Augment an (image, matte) pair, also returning the concrete draws so a
/// background can be transformed identically with [`apply_geometry`].
pub fn augment_with_params(
    image: &Image,
    matte: &EnvironmentMatte,
    cfg: &AugmentConfig,
) -> Result<(Image, EnvironmentMatte, AugmentParams)> {
    matte.validate()?;
    if !image.same_size(&matte.mask) {
        return Err(MatteError::shape("image and matte differ in size"));
    }
    let params = AugmentParams::sample(cfg, image.height(), image.width())?;

    let mut img = color_jitter(image, params.brightness, params.contrast, params.saturation);
    img = img.resize_bilinear(params.scaled_height, params.scaled_width);
    img = add_noise(&img, cfg.noise, params.noise_seed);
    if params.hflip {
        img = img.flip_horizontal();
    }
    if params.vflip {
        img = img.flip_vertical();
    }
    let out_matte = matte_geometry(matte, &params)?;
    if cfg.boundary_blur_radius > 0 {
        // band is located on the full (uncropped) frame
        let mut full_mask = resize_nearest(&matte.mask, params.scaled_height, params.scaled_width);
        if params.hflip {
            full_mask = full_mask.flip_horizontal();
        }
        if params.vflip {
            full_mask = full_mask.flip_vertical();
        }
        img = blur_boundary(&img, &full_mask, cfg.boundary_blur_radius);
    }
    let img = img.crop(params.crop_x, params.crop_y, params.crop, params.crop)?;
    Ok((img, out_matte, params))
}

/// Seeded augmentation of an (image, matte) pair: color jitter, scaling,
/// noise, flips, boundary blur, then an aligned square crop.
pub fn augment(
    image: &Image,
    matte: &EnvironmentMatte,
    cfg: &AugmentConfig,
) -> Result<(Image, EnvironmentMatte)> {
    let (img, m, _) = augment_with_params(image, matte, cfg)?;
    Ok((img, m))
}
