//! Training-loss formulas for environment-matte prediction and their
//! weighting schemes.
//!
//! Reductions run sequentially in row-major order so results do not depend
//! on the caller's threading.

use crate::error::{MatteError, Result};
use crate::flow::FlowField;
use crate::image::Image;

/// Probability clamp applied before the logarithm in [`mask_loss`].
pub const PROB_EPS: f64 = 1e-12;

/// Number of prediction scales in the multi-scale weighting.
pub const SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Coarse-stage mask segmentation weight.
    pub a_ms: f64,
    /// Coarse-stage attenuation regression weight.
    pub a_ar: f64,
    /// Coarse-stage flow regression weight.
    pub a_fr: f64,
    /// Coarse-stage image reconstruction weight.
    pub a_ir: f64,
    /// Refinement-stage attenuation weight.
    pub r_ar: f64,
    /// Refinement-stage flow weight.
    pub r_fr: f64,
    /// Weight of scale `s` (1-based, coarsest first) at index `s - 1`.
    pub scale_weights: [f64; SCALES],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            a_ms: 0.1,
            a_ar: 1.0,
            a_fr: 0.01,
            a_ir: 1.0,
            r_ar: 1.0,
            r_fr: 1.0,
            scale_weights: std::array::from_fn(|i| 1.0 / f64::powi(2.0, (SCALES - 1 - i) as i32)),
        }
    }
}

fn check_planes(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(MatteError::shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
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

/// Binary cross-entropy between predicted foreground probability and a
/// binary ground-truth mask, averaged over pixels.
pub fn mask_loss(pred_prob: &Image, gt_mask: &Image) -> Result<f64> {
    check_planes(pred_prob, gt_mask, "mask_loss")?;
    let n = pred_prob.data().len();
    let sum: f64 = pred_prob
        .data()
        .iter()
        .zip(gt_mask.data())
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            g * p.ln() + (1.0 - g) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / n as f64)
}

/// Mean squared error of the attenuation plane.
pub fn attenuation_loss(pred: &Image, gt: &Image) -> Result<f64> {
    check_planes(pred, gt, "attenuation_loss")?;
    let n = pred.data().len();
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

/// Average end-point error over all pixels. Invalid vectors count as zero.
pub fn flow_loss(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MatteError::shape("flow_loss: flow fields differ in size"));
    }
    let n = pred.data().len();
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    Ok(sum / n as f64)
}

/// Squared color distance summed over channels, averaged over pixels.
pub fn reconstruction_loss(reconstructed: &Image, target: &Image) -> Result<f64> {
    check_planes(reconstructed, target, "reconstruction_loss")?;
    let sum: f64 = reconstructed
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reconstructed.pixel_count() as f64)
}

/// Correctly rounded sum of `terms` (Shewchuk partials), so weighted totals
/// do not depend on term order.
pub(crate) fn exact_sum(terms: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(terms.len());
    for &t in terms {
        let mut x = t;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // round-half-even correction when the remainder sits exactly on a tie
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Weighted coarse-stage total.
pub fn coarse_total(ms: f64, ar: f64, fr: f64, ir: f64, w: &LossWeights) -> f64 {
    exact_sum(&[w.a_ms * ms, w.a_ar * ar, w.a_fr * fr, w.a_ir * ir])
}

/// Scale-weighted sum; `per_scale[0]` is the coarsest scale.
pub fn multiscale_total(per_scale: &[f64; SCALES], w: &LossWeights) -> f64 {
    let terms: [f64; SCALES] = std::array::from_fn(|i| per_scale[i] * w.scale_weights[i]);
    exact_sum(&terms)
}

/// Weighted refinement-stage total.
pub fn refine_total(ar: f64, fr: f64, w: &LossWeights) -> f64 {
    exact_sum(&[w.r_ar * ar, w.r_fr * fr])
}
