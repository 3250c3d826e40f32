//! Evaluation metrics for predicted mattes and reconstructions.

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::image::Image;

/// SSIM Gaussian window size.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian window standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Flow end-point error over the whole image and within the object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpeReport {
    pub whole_image: f64,
    /// `None` when the ground-truth mask is empty.
    pub object_region: Option<f64>,
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(MatteError::shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean end-point error. Invalid vectors are treated as `(0, 0)`.
pub fn epe(pred: &FlowField, gt: &FlowField, gt_mask: &Image) -> Result<EpeReport> {
    if pred.height() != gt.height()
        || pred.width() != gt.width()
        || gt_mask.height() != gt.height()
        || gt_mask.width() != gt.width()
    {
        return Err(MatteError::shape(
            "epe: flow fields and mask differ in size",
        ));
    }
    let mut whole = 0.0;
    let mut region = 0.0;
    let mut region_count = 0usize;
    for ((p, g), &m) in pred.data().iter().zip(gt.data()).zip(gt_mask.data()) {
        let e = (p[0] - g[0]).hypot(p[1] - g[1]);
        whole += e;
        if m > 0.5 {
            region += e;
            region_count += 1;
        }
    }
    Ok(EpeReport {
        whole_image: whole / pred.data().len() as f64,
        object_region: (region_count > 0).then(|| region / region_count as f64),
    })
}

/// Intersection over union of two masks thresholded at 0.5; 1 when both
/// are empty.
pub fn iou(pred_mask: &Image, gt_mask: &Image) -> Result<f64> {
    check_same(pred_mask, gt_mask)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred_mask.data().iter().zip(gt_mask.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean squared difference over all samples.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter, renormalizing the window where it leaves the
/// image.
fn gaussian_filter(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() as isize / 2;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, &kv) in kernel.iter().enumerate() {
                    let off = k as isize - r;
                    let (sx, sy) = if along_x {
                        (x as isize + off, y as isize)
                    } else {
                        (x as isize, y as isize + off)
                    };
                    if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    wsum += kv;
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Mean structural similarity. Color images are compared on Rec. 601 luma
/// with dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MatteError::shape("ssim: images differ in size"));
    }
    if a.is_empty() {
        return Err(MatteError::invalid("ssim of an empty image"));
    }
    let (h, w) = (a.height(), a.width());
    let la = a.to_luma();
    let lb = b.to_luma();
    let (x, y) = (la.data(), lb.data());
    let kernel = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = gaussian_filter(x, h, w, &kernel);
    let mu_y = gaussian_filter(y, h, w, &kernel);
    let e_xx = gaussian_filter(&xx, h, w, &kernel);
    let e_yy = gaussian_filter(&yy, h, w, &kernel);
    let e_xy = gaussian_filter(&xy, h, w, &kernel);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..h * w {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (h * w) as f64)
}
