//! File formats: PNG rasters, `.flo` flow fields, matte bundles, Gray-code
//! stack directories, and trimap PNGs. Every write goes to a temporary file
//! in the destination directory and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use ::image::codecs::png::{PngDecoder, PngEncoder};
use ::image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::graycode::GrayCodeStack;
use crate::image::Image;
use crate::matte::{EnvironmentMatte, Trimap};

/// Magic number at the start of a `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;
/// Vectors with a component above this magnitude are unknown.
pub const FLO_UNKNOWN_THRESHOLD: f32 = 1e9;
/// Value written for invalid vectors.
pub const FLO_UNKNOWN: f32 = 1e10;
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

pub const MASK_FILE: &str = "mask.png";
pub const MASK_SOFT_FILE: &str = "mask_soft.png";
pub const RHO_FILE: &str = "rho.png";
pub const FLOW_FILE: &str = "flow.flo";
pub const COLOR_FILE: &str = "r.png";
pub const SPECULAR_FILE: &str = "s.png";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// PNG sample depth for writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_level(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Round samples to the levels [`encode_png`] stores at `depth`, so that
/// writing and reading back is the identity on the result.
pub fn quantize(img: &Image, depth: BitDepth) -> Image {
    let max = depth.max_level();
    img.map(|v| (v.clamp(0.0, 1.0) * max).round() / max)
}

/// Write `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MatteError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| MatteError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| MatteError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| MatteError::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MatteError::io(path, e))
}

/// Read an 8- or 16-bit grayscale or RGB PNG (an alpha channel is dropped)
/// with samples mapped linearly to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    Ok(read_image_with_depth(path)?.0)
}

/// Like [`read_image`], also returning the stored sample depth.
pub fn read_image_with_depth(path: impl AsRef<Path>) -> Result<(Image, BitDepth)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| MatteError::io(path, e))?;
    let decoder = PngDecoder::new(BufReader::new(file))
        .map_err(|e| MatteError::format(path, e.to_string()))?;
    let img =
        DynamicImage::from_decoder(decoder).map_err(|e| MatteError::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let depth = if img.color().bytes_per_pixel() / img.color().channel_count() == 2 {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    };
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (
            1,
            b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ),
        DynamicImage::ImageLumaA8(_) => (1, to_f64_8(img.to_luma8().into_raw())),
        DynamicImage::ImageRgb8(b) => (3, to_f64_8(b.into_raw())),
        DynamicImage::ImageRgba8(_) => (3, to_f64_8(img.to_rgb8().into_raw())),
        DynamicImage::ImageLuma16(b) => (1, to_f64_16(b.into_raw())),
        DynamicImage::ImageLumaA16(_) => (1, to_f64_16(img.to_luma16().into_raw())),
        DynamicImage::ImageRgb16(b) => (3, to_f64_16(b.into_raw())),
        DynamicImage::ImageRgba16(_) => (3, to_f64_16(img.to_rgb16().into_raw())),
        other => {
            return Err(MatteError::format(
                path,
                format!("unsupported sample layout {:?}", other.color()),
            ))
        }
    };
    Ok((Image::from_vec(h, w, channels, data)?, depth))
}

fn to_f64_8(v: Vec<u8>) -> Vec<f64> {
    v.into_iter().map(|s| s as f64 / 255.0).collect()
}

fn to_f64_16(v: Vec<u16>) -> Vec<f64> {
    v.into_iter().map(|s| s as f64 / 65535.0).collect()
}

/// Encode an image as PNG bytes. Samples are clamped to `[0, 1]` and rounded.
pub fn encode_png(img: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let q8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let q16 = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let dynamic = match (img.channels(), depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| q8(v)).collect())
                .unwrap(),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(
                w,
                h,
                img.data().iter().map(|&v| q16(v)).collect(),
            )
            .unwrap(),
        ),
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| q8(v)).collect())
                .unwrap(),
        ),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(
                w,
                h,
                img.data().iter().map(|&v| q16(v)).collect(),
            )
            .unwrap(),
        ),
        (c, _) => {
            return Err(MatteError::invalid(format!(
                "cannot write a {c}-channel image as PNG"
            )))
        }
    };
    if img.is_empty() {
        return Err(MatteError::invalid("cannot write an empty image"));
    }
    let mut out = Vec::new();
    dynamic
        .write_with_encoder(PngEncoder::new(&mut out))
        .map_err(|e| MatteError::invalid(e.to_string()))?;
    Ok(out)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    write_atomic(path.as_ref(), &encode_png(img, depth)?)
}

/// Encode a flow field in the `.flo` format. Invalid vectors are written as
/// [`FLO_UNKNOWN`].
pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let n = flow.width() * flow.height();
    let mut out = Vec::with_capacity(12 + 8 * n);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (v, &ok) in flow.data().iter().zip(flow.valid_mask()) {
        let (dx, dy) = if ok {
            (v[0] as f32, v[1] as f32)
        } else {
            (FLO_UNKNOWN, FLO_UNKNOWN)
        };
        out.extend_from_slice(&dx.to_le_bytes());
        out.extend_from_slice(&dy.to_le_bytes());
    }
    out
}

/// Decode `.flo` bytes; `path` is only used in error messages.
pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    if bytes.len() < 12 {
        return Err(MatteError::format(path, "truncated header"));
    }
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(MatteError::format(path, "bad magic number"));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(MatteError::format(
            path,
            format!("invalid dimensions {w}x{h}"),
        ));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = (w as u64) * (h as u64) * 8 + 12;
    if bytes.len() as u64 != expected {
        return Err(MatteError::format(
            path,
            format!(
                "expected {expected} bytes for {w}x{h}, found {}",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let dx = f32::from_le_bytes(word(12 + 8 * i));
        let dy = f32::from_le_bytes(word(16 + 8 * i));
        let ok = dx.is_finite()
            && dy.is_finite()
            && dx.abs() <= FLO_UNKNOWN_THRESHOLD
            && dy.abs() <= FLO_UNKNOWN_THRESHOLD;
        data.push(if ok { [dx as f64, dy as f64] } else { [0.0; 2] });
        valid.push(ok);
    }
    FlowField::from_parts(h, w, data, valid)
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flow(&read_bytes(path)?, path)
}

pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_atomic(path.as_ref(), &encode_flow(flow))
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MatteError::format(
                path,
                format!("line {}: expected key=value", n + 1),
            ));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read_bytes(path)?;
    let text =
        String::from_utf8(bytes).map_err(|_| MatteError::format(path, "manifest is not UTF-8"))?;
    parse_manifest(&text, path)
}

fn manifest_usize(m: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<usize> {
    m.get(key)
        .ok_or_else(|| MatteError::format(path, format!("missing key {key}")))?
        .parse()
        .map_err(|_| MatteError::format(path, format!("{key} is not a non-negative integer")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MatteError::io(dir, e))
}

fn check_size(img: &Image, h: usize, w: usize, channels: usize, path: &Path) -> Result<()> {
    if img.height() != h || img.width() != w {
        return Err(MatteError::format(
            path,
            format!(
                "raster is {}x{}, manifest says {w}x{h}",
                img.width(),
                img.height()
            ),
        ));
    }
    if img.channels() != channels {
        return Err(MatteError::format(
            path,
            format!("expected {channels} channel(s), found {}", img.channels()),
        ));
    }
    Ok(())
}

/// Write a matte bundle. The mask is stored hard (thresholded at 0.5); a
/// non-binary mask is also kept as a 16-bit `mask_soft.png` when
/// `keep_soft_mask` is set.
pub fn write_bundle(
    dir: impl AsRef<Path>,
    matte: &EnvironmentMatte,
    keep_soft_mask: bool,
) -> Result<()> {
    let dir = dir.as_ref();
    matte.validate()?;
    create_dir(dir)?;
    let hard = matte.mask.map(|m| if m > 0.5 { 1.0 } else { 0.0 });
    let soft = keep_soft_mask && hard != matte.mask;
    let mut flags = Vec::new();
    write_image(dir.join(MASK_FILE), &hard, BitDepth::Eight)?;
    remove_stale(&dir.join(MASK_SOFT_FILE), soft)?;
    if soft {
        write_image(dir.join(MASK_SOFT_FILE), &matte.mask, BitDepth::Sixteen)?;
        flags.push("soft_mask");
    }
    write_image(dir.join(RHO_FILE), &matte.attenuation, BitDepth::Sixteen)?;
    write_flow(dir.join(FLOW_FILE), &matte.flow)?;
    remove_stale(&dir.join(COLOR_FILE), matte.color_attenuation.is_some())?;
    remove_stale(&dir.join(SPECULAR_FILE), matte.specular.is_some())?;
    if let Some(r) = &matte.color_attenuation {
        write_image(dir.join(COLOR_FILE), r, BitDepth::Sixteen)?;
        flags.push("color");
    }
    if let Some(s) = &matte.specular {
        write_image(dir.join(SPECULAR_FILE), s, BitDepth::Sixteen)?;
        flags.push("specular");
    }
    let manifest = format!(
        "width={}\nheight={}\nformat_version={}\nflags={}\n",
        matte.width(),
        matte.height(),
        BUNDLE_FORMAT_VERSION,
        if flags.is_empty() {
            "none".to_string()
        } else {
            flags.join(",")
        }
    );
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

/// Delete `path` if it exists and will not be rewritten.
fn remove_stale(path: &Path, rewritten: bool) -> Result<()> {
    if !rewritten && path.exists() {
        fs::remove_file(path).map_err(|e| MatteError::io(path, e))?;
    }
    Ok(())
}

/// Read a matte bundle with its hard mask. Flow vectors outside the mask are
/// marked invalid.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<EnvironmentMatte> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(&manifest_path)?;
    let version = manifest_usize(&manifest, "format_version", &manifest_path)?;
    if version != BUNDLE_FORMAT_VERSION as usize {
        return Err(MatteError::format(
            &manifest_path,
            format!("unsupported format_version {version}"),
        ));
    }
    let w = manifest_usize(&manifest, "width", &manifest_path)?;
    let h = manifest_usize(&manifest, "height", &manifest_path)?;
    let flags: Vec<&str> = manifest
        .get("flags")
        .map(|f| {
            f.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty() && *s != "none")
                .collect()
        })
        .unwrap_or_default();

    let load = |name: &str, channels: usize| -> Result<Image> {
        let path = dir.join(name);
        let img = read_image(&path)?;
        let img = if channels == 1 && img.channels() == 3 {
            img.to_luma()
        } else {
            img
        };
        check_size(&img, h, w, channels, &path)?;
        Ok(img)
    };
    let mask = load(MASK_FILE, 1)?.map(|m| if m > 0.5 { 1.0 } else { 0.0 });
    let attenuation = load(RHO_FILE, 1)?;
    let flow_path = dir.join(FLOW_FILE);
    let mut flow = read_flow(&flow_path)?;
    if flow.height() != h || flow.width() != w {
        return Err(MatteError::format(
            &flow_path,
            format!(
                "flow is {}x{}, manifest says {w}x{h}",
                flow.width(),
                flow.height()
            ),
        ));
    }
    let valid: Vec<bool> = flow
        .valid_mask()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| v && m > 0.5)
        .collect();
    let data = flow.data().to_vec();
    flow = FlowField::from_parts(h, w, data, valid)?;

    let mut matte = EnvironmentMatte::new(mask, attenuation, flow)?;
    if flags.contains(&"color") || dir.join(COLOR_FILE).exists() {
        matte.color_attenuation = Some(load(COLOR_FILE, 3)?);
    }
    if flags.contains(&"specular") || dir.join(SPECULAR_FILE).exists() {
        matte.specular = Some(load(SPECULAR_FILE, 1)?);
    }
    matte.validate()?;
    Ok(matte)
}

/// The optional soft mask of a bundle.
pub fn read_soft_mask(dir: impl AsRef<Path>) -> Result<Option<Image>> {
    let path = dir.as_ref().join(MASK_SOFT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let img = read_image(&path)?;
    Ok(Some(if img.channels() == 3 {
        img.to_luma()
    } else {
        img
    }))
}

/// Encode a trimap as an 8-bit PNG: background 0, unknown 128, foreground 255.
pub fn encode_trimap(trimap: &Trimap) -> Result<Vec<u8>> {
    let (w, h) = (trimap.width() as u32, trimap.height() as u32);
    let raw: Vec<u8> = trimap
        .labels()
        .iter()
        .map(|&l| match l {
            Trimap::BACKGROUND => 0,
            Trimap::UNKNOWN => 128,
            _ => 255,
        })
        .collect();
    let mut out = Vec::new();
    DynamicImage::ImageLuma8(ImageBuffer::from_raw(w, h, raw).unwrap())
        .write_with_encoder(PngEncoder::new(Cursor::new(&mut out)))
        .map_err(|e| MatteError::invalid(e.to_string()))?;
    Ok(out)
}

pub fn write_trimap(path: impl AsRef<Path>, trimap: &Trimap) -> Result<()> {
    write_atomic(path.as_ref(), &encode_trimap(trimap)?)
}

/// Read a trimap PNG; gray levels map to the nearest of 0, 128 and 255.
pub fn read_trimap(path: impl AsRef<Path>) -> Result<Trimap> {
    let path = path.as_ref();
    let img = read_image(path)?;
    let luma = if img.channels() == 3 {
        img.to_luma()
    } else {
        img
    };
    let labels = luma
        .data()
        .iter()
        .map(|&v| {
            let level = v * 255.0;
            if level < 64.0 {
                Trimap::BACKGROUND
            } else if level < 192.0 {
                Trimap::UNKNOWN
            } else {
                Trimap::FOREGROUND
            }
        })
        .collect();
    Trimap::from_labels(luma.height(), luma.width(), labels)
}

fn plane_name(axis: char, i: usize) -> String {
    format!("{axis}_{i:02}.png")
}

/// Write a Gray-code stack as 8-bit PNGs plus a manifest listing the files.
pub fn write_stack(dir: impl AsRef<Path>, stack: &GrayCodeStack) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut manifest = format!(
        "pattern_width={}\npattern_height={}\n",
        stack.width, stack.height
    );
    let mut put = |key: String, name: String, img: &Image| -> Result<()> {
        write_image(dir.join(&name), img, BitDepth::Eight)?;
        manifest.push_str(&format!("{key}={name}\n"));
        Ok(())
    };
    put("black".into(), "black.png".into(), &stack.black)?;
    put("white".into(), "white.png".into(), &stack.white)?;
    for (i, p) in stack.x_planes.iter().enumerate() {
        put(format!("x.{i}"), plane_name('x', i), p)?;
    }
    for (i, p) in stack.y_planes.iter().enumerate() {
        put(format!("y.{i}"), plane_name('y', i), p)?;
    }
    if let Some(m) = &stack.mask_capture {
        put("mask".into(), "mask_capture.png".into(), m)?;
    }
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

/// Read a stack directory written by [`write_stack`] (or hand-assembled
/// captures with the same manifest keys).
pub fn read_stack(dir: impl AsRef<Path>) -> Result<GrayCodeStack> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(&manifest_path)?;
    let width = manifest_usize(&manifest, "pattern_width", &manifest_path)?;
    let height = manifest_usize(&manifest, "pattern_height", &manifest_path)?;
    let file = |key: &str| -> Result<PathBuf> {
        manifest
            .get(key)
            .map(|name| dir.join(name))
            .ok_or_else(|| MatteError::format(&manifest_path, format!("missing key {key}")))
    };
    let planes = |axis: char| -> Result<Vec<Image>> {
        let mut out = Vec::new();
        while let Some(name) = manifest.get(&format!("{axis}.{}", out.len())) {
            out.push(read_image(dir.join(name))?);
        }
        Ok(out)
    };
    Ok(GrayCodeStack {
        width,
        height,
        black: read_image(file("black")?)?,
        white: read_image(file("white")?)?,
        x_planes: planes('x')?,
        y_planes: planes('y')?,
        mask_capture: manifest
            .get("mask")
            .map(|name| read_image(dir.join(name)))
            .transpose()?,
    })
}
