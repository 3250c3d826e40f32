//! Direct estimation of an environment matte from an input photograph and
//! the background it was taken against.
//!
//! The objective at each pyramid level is
//!
//! ```text
//! E = 1/N Σ_p ‖C_p − I_p‖²                      reconstruction
//!   + w_f/N Σ_edges φ(ΔFx) + φ(ΔFy)             flow smoothness
//!   + w_ρ/N Σ_edges φ(Δρ)                       attenuation smoothness
//!   + w_m/N Σ_free m_p                          mask prior
//! ```
//!
//! with `C` the composite of the current matte over the background,
//! `φ(d) = sqrt(d² + ε²) − ε` and `m = sigmoid(k · logit)`. The mask prior
//! breaks the tie between "no object" and "object with ρ = 1, F = 0", which
//! render identically.
//!
//! Each iteration approximately solves `H d = −g` by conjugate gradients,
//! where `H` combines the Gauss-Newton approximation of the data term, a
//! reweighted quadratic bound on the smoothness terms (coupling neighbours),
//! the convex part of the prior, and a Levenberg-style damping. Per-pixel
//! 4x4 blocks of `H` precondition the solve. `H` is positive definite so
//! the step is a descent direction; a halving Armijo search then guarantees
//! the objective never increases within a level. Smoothness weights are
//! reduced on coarser levels.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MatteError, Result, TracePoint};
use crate::flow::FlowField;
use crate::image::Image;
use crate::matte::{EnvironmentMatte, Trimap};

/// Charbonnier smoothing constant.
pub const TV_EPS: f64 = 1e-3;
/// Armijo sufficient-decrease constant.
pub const ARMIJO_C: f64 = 1e-4;
/// Smallest pyramid level side.
pub const MIN_LEVEL_SIDE: usize = 8;

const MAX_HALVINGS: usize = 40;
const LOGIT_BOUND: f64 = 30.0;
const PARAMS: usize = 4;
/// Lower bound on |d| in the flow TV curvature used by the solver.
const TV_CURVATURE_FLOOR: f64 = 0.05;
/// Conjugate-gradient budget and relative tolerance per step.
const CG_ITERATIONS: usize = 40;
const CG_TOLERANCE: f64 = 1e-3;
/// Smoothness weights shrink by this factor per level below the finest,
/// offsetting the weaker data term of blurred levels.
const COARSE_TV_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    /// First trial step of the line search, as a multiple of the
    /// preconditioned direction.
    pub step_size: f64,
    pub tv_weight_flow: f64,
    pub tv_weight_rho: f64,
    /// Slope `k` of the mask sigmoid.
    pub mask_sharpness: f64,
    /// Weight of the mean-mask prior.
    pub mask_prior: f64,
    /// Amplitude of the seeded offset added to the initial flow and mask
    /// logits. Keeps the start off the sampling lattice, where the
    /// objective is not differentiable.
    pub init_jitter: f64,
    pub seed: u64,
    /// Stop a level once the relative objective decrease falls below this.
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            pyramid_levels: 4,
            iterations_per_level: 300,
            step_size: 1.0,
            tv_weight_flow: 1e-3,
            tv_weight_rho: 1e-3,
            mask_sharpness: 1.0,
            mask_prior: 1e-4,
            init_jitter: 1e-2,
            seed: 0,
            convergence_tol: 1e-10,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(MatteError::invalid("pyramid_levels must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(MatteError::invalid("step_size must be positive"));
        }
        if !(self.mask_sharpness.is_finite() && self.mask_sharpness > 0.0) {
            return Err(MatteError::invalid("mask_sharpness must be positive"));
        }
        for (name, w) in [
            ("tv_weight_flow", self.tv_weight_flow),
            ("tv_weight_rho", self.tv_weight_rho),
            ("mask_prior", self.mask_prior),
            ("init_jitter", self.init_jitter),
            ("convergence_tol", self.convergence_tol),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(MatteError::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Per-pixel derivatives of the warped background with respect to the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGradient {
    /// `∂ M(T, p + F) / ∂Fx`, one value per background channel.
    pub d_dx: Image,
    /// `∂ M(T, p + F) / ∂Fy`.
    pub d_dy: Image,
}

/// Analytic derivative of bilinear warping. Lattice positions take the
/// right/lower cell; clamped positions have zero derivative.
pub fn warp_gradient(background: &Image, flow: &FlowField) -> Result<WarpGradient> {
    if background.height() != flow.height() || background.width() != flow.width() {
        return Err(MatteError::shape(
            "warp_gradient: background and flow differ in size",
        ));
    }
    let (h, w, ch) = (
        background.height(),
        background.width(),
        background.channels(),
    );
    let mut d_dx = Image::new(h, w, ch);
    let mut d_dy = Image::new(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let [fx, fy] = flow.get(x, y);
            for c in 0..ch {
                let (_, gx, gy) = background.sample_with_grad(x as f64 + fx, y as f64 + fy, c);
                d_dx.set(x, y, c, gx);
                d_dy.set(x, y, c, gy);
            }
        }
    }
    Ok(WarpGradient { d_dx, d_dy })
}

/// Matte parameters of one level, interleaved per pixel as
/// `[Fx, Fy, ρ, mask logit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FitParams {
    /// Flow 0, ρ 1, logit 0.
    pub fn initial(height: usize, width: usize) -> Self {
        let mut values = vec![0.0; height * width * PARAMS];
        for px in values.chunks_exact_mut(PARAMS) {
            px[2] = 1.0;
        }
        FitParams {
            height,
            width,
            values,
        }
    }

    /// [`FitParams::initial`] with a seeded uniform offset of at most
    /// `amplitude` added to the flow components and logits. The offset is
    /// the same at every pixel.
    pub fn jittered(height: usize, width: usize, amplitude: f64, seed: u64) -> Self {
        let mut params = FitParams::initial(height, width);
        if amplitude > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offset: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-amplitude..=amplitude));
            for px in params.values.chunks_exact_mut(PARAMS) {
                px[0] = offset[0];
                px[1] = offset[1];
                px[3] = offset[2];
            }
        }
        params
    }

    fn plane(&self, k: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |x, y, _| {
            self.values[(y * self.width + x) * PARAMS + k]
        })
    }

    fn flow(&self) -> FlowField {
        FlowField::from_fn(self.height, self.width, |x, y| {
            let i = (y * self.width + x) * PARAMS;
            [self.values[i], self.values[i + 1]]
        })
    }

    /// Resample to a finer grid: flow via [`FlowField::resample`], ρ and
    /// logits bilinearly.
    fn upsample(&self, height: usize, width: usize) -> FitParams {
        let flow = self.flow().resample(height, width);
        let rho = self.plane(2).resize_bilinear(height, width);
        let logit = self.plane(3).resize_bilinear(height, width);
        let mut values = Vec::with_capacity(height * width * PARAMS);
        for y in 0..height {
            for x in 0..width {
                let [fx, fy] = flow.get(x, y);
                values.extend_from_slice(&[fx, fy, rho.get(x, y, 0), logit.get(x, y, 0)]);
            }
        }
        FitParams {
            height,
            width,
            values,
        }
    }
}

/// Objective of a single pyramid level.
pub struct FitProblem {
    input: Image,
    background: Image,
    /// Mask value forced by the trimap, if any.
    fixed_mask: Vec<Option<f64>>,
    tv_flow: f64,
    tv_rho: f64,
    sharpness: f64,
    prior: f64,
}

/// Objective value, gradient and the Gauss-Newton curvature: per-pixel 4x4
/// blocks (row-major) plus smoothness couplings to the right and down
/// neighbours for Fx, Fy and ρ.
struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    blocks: Vec<[f64; PARAMS * PARAMS]>,
    right: Vec<[f64; 3]>,
    down: Vec<[f64; 3]>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn charbonnier(d: f64, floor: f64) -> (f64, f64, f64) {
    let r = (d * d + TV_EPS * TV_EPS).sqrt();
    // value, derivative, preconditioner curvature
    (r - TV_EPS, d / r, 1.0 / r.max(floor))
}

impl FitProblem {
    pub fn new(
        input: Image,
        background: Image,
        trimap: Option<&Trimap>,
        cfg: &FitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if !input.same_size(&background) || input.channels() != background.channels() {
            return Err(MatteError::shape(format!(
                "input {}x{}x{} vs background {}x{}x{}",
                input.height(),
                input.width(),
                input.channels(),
                background.height(),
                background.width(),
                background.channels()
            )));
        }
        let n = input.pixel_count();
        let fixed_mask = match trimap {
            None => vec![None; n],
            Some(t) => {
                if t.height() != input.height() || t.width() != input.width() {
                    return Err(MatteError::shape("trimap does not match input"));
                }
                t.labels()
                    .iter()
                    .map(|&l| match l {
                        Trimap::FOREGROUND => Some(1.0),
                        Trimap::BACKGROUND => Some(0.0),
                        _ => None,
                    })
                    .collect()
            }
        };
        Ok(FitProblem {
            input,
            background,
            fixed_mask,
            tv_flow: cfg.tv_weight_flow,
            tv_rho: cfg.tv_weight_rho,
            sharpness: cfg.mask_sharpness,
            prior: cfg.mask_prior,
        })
    }

    pub fn height(&self) -> usize {
        self.input.height()
    }

    pub fn width(&self) -> usize {
        self.input.width()
    }

    #[inline]
    fn mask_of(&self, i: usize, logit: f64) -> (f64, f64) {
        match self.fixed_mask[i] {
            Some(m) => (m, 0.0),
            None => {
                let m = sigmoid(self.sharpness * logit);
                (m, self.sharpness * m * (1.0 - m))
            }
        }
    }

    pub fn objective(&self, params: &FitParams) -> f64 {
        self.evaluate(params, false).value
    }

    /// Objective value and its gradient with respect to `params.values`.
    pub fn gradient(&self, params: &FitParams) -> (f64, Vec<f64>) {
        let e = self.evaluate(params, true);
        (e.value, e.grad)
    }

    /// Composite of the soft matte described by `params`.
    pub fn render(&self, params: &FitParams) -> Image {
        let (h, w, ch) = (self.height(), self.width(), self.background.channels());
        Image::from_fn(h, w, ch, |x, y, c| {
            let i = y * w + x;
            let p = &params.values[i * PARAMS..(i + 1) * PARAMS];
            let (m, _) = self.mask_of(i, p[3]);
            let s = self.background.sample(x as f64 + p[0], y as f64 + p[1], c);
            (1.0 - m) * self.background.get(x, y, c) + m * p[2] * s
        })
    }

    fn evaluate(&self, params: &FitParams, derivatives: bool) -> Evaluation {
        let (h, w, ch) = (self.height(), self.width(), self.background.channels());
        let n = h * w;
        let inv_n = 1.0 / n as f64;

        // Data term, per pixel in parallel; summed sequentially below.
        struct PixelTerm {
            value: f64,
            grad: [f64; PARAMS],
            block: [f64; PARAMS * PARAMS],
        }
        let terms: Vec<PixelTerm> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let p = &params.values[i * PARAMS..(i + 1) * PARAMS];
                let (fx, fy, rho, logit) = (p[0], p[1], p[2], p[3]);
                let (m, dm_dl) = self.mask_of(i, logit);
                let mut value = 0.0;
                let mut grad = [0.0; PARAMS];
                let mut block = [0.0; PARAMS * PARAMS];
                for c in 0..ch {
                    let b = self.background.get(x, y, c);
                    let (s, sx, sy) =
                        self.background
                            .sample_with_grad(x as f64 + fx, y as f64 + fy, c);
                    let r = (1.0 - m) * b + m * rho * s - self.input.get(x, y, c);
                    value += r * r;
                    if derivatives {
                        let j = [m * rho * sx, m * rho * sy, m * s, (rho * s - b) * dm_dl];
                        for a in 0..PARAMS {
                            grad[a] += 2.0 * inv_n * r * j[a];
                            for bb in 0..PARAMS {
                                block[a * PARAMS + bb] += 2.0 * inv_n * j[a] * j[bb];
                            }
                        }
                    }
                }
                if self.prior > 0.0 && self.fixed_mask[i].is_none() {
                    value += self.prior * m;
                    if derivatives {
                        grad[3] += self.prior * inv_n * dm_dl;
                        // d²m/dl² = k² m (1 - m)(1 - 2m); keep the convex part
                        let curv = self.sharpness * dm_dl * (1.0 - 2.0 * m);
                        block[3 * PARAMS + 3] += self.prior * inv_n * curv.max(0.0);
                    }
                }
                PixelTerm { value, grad, block }
            })
            .collect();

        let mut value = 0.0;
        for t in &terms {
            value += t.value;
        }
        value *= inv_n;

        let mut right = if derivatives {
            vec![[0.0; 3]; n]
        } else {
            Vec::new()
        };
        let mut down = right.clone();
        let (mut grad, mut blocks) = if derivatives {
            let mut grad = Vec::with_capacity(n * PARAMS);
            let mut blocks = Vec::with_capacity(n);
            for t in &terms {
                grad.extend_from_slice(&t.grad);
                blocks.push(t.block);
            }
            (grad, blocks)
        } else {
            (Vec::new(), Vec::new())
        };

        // Smoothness over right and down neighbours, row-major.
        let mut smooth = 0.0;
        let components: [(usize, f64); 3] =
            [(0, self.tv_flow), (1, self.tv_flow), (2, self.tv_rho)];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)]
                    .into_iter()
                    .flatten()
                {
                    for &(k, weight) in &components {
                        if weight == 0.0 {
                            continue;
                        }
                        let d = params.values[j * PARAMS + k] - params.values[i * PARAMS + k];
                        let floor = if k < 2 { TV_CURVATURE_FLOOR } else { 0.0 };
                        let (phi, dphi, curv) = charbonnier(d, floor);
                        smooth += weight * phi;
                        if derivatives {
                            let g = weight * inv_n * dphi;
                            grad[j * PARAMS + k] += g;
                            grad[i * PARAMS + k] -= g;
                            let c = 2.0 * weight * inv_n * curv;
                            blocks[i][k * PARAMS + k] += c;
                            blocks[j][k * PARAMS + k] += c;
                            if j == i + 1 {
                                right[i][k] = c;
                            } else {
                                down[i][k] = c;
                            }
                        }
                    }
                }
            }
        }
        value += smooth * inv_n;

        Evaluation {
            value,
            grad,
            blocks,
            right,
            down,
        }
    }

    fn project(&self, values: &mut [f64]) {
        let (bw, bh) = (self.width() as f64, self.height() as f64);
        for (i, px) in values.chunks_exact_mut(PARAMS).enumerate() {
            px[0] = px[0].clamp(-bw, bw);
            px[1] = px[1].clamp(-bh, bh);
            px[2] = px[2].clamp(0.0, 1.0);
            px[3] = if self.fixed_mask[i].is_some() {
                0.0
            } else {
                px[3].clamp(-LOGIT_BOUND, LOGIT_BOUND)
            };
        }
    }

    /// Convert level parameters into a matte. The mask stays soft; flow
    /// validity follows `mask > 0.5`.
    pub fn to_matte(&self, params: &FitParams) -> EnvironmentMatte {
        let (h, w) = (self.height(), self.width());
        let mask = Image::from_fn(h, w, 1, |x, y, _| {
            let i = y * w + x;
            self.mask_of(i, params.values[i * PARAMS + 3]).0
        });
        let mut flow = params.flow();
        flow.restrict_to(&mask);
        EnvironmentMatte {
            mask,
            attenuation: params.plane(2),
            flow,
            color_attenuation: None,
            specular: None,
        }
    }
}

/// Solve `A d = b` for a symmetric positive definite 4x4 `A` by Cholesky.
fn solve_spd(a: &[f64; PARAMS * PARAMS], b: &[f64; PARAMS]) -> [f64; PARAMS] {
    let mut l = [0.0; PARAMS * PARAMS];
    for i in 0..PARAMS {
        for j in 0..=i {
            let mut s = a[i * PARAMS + j];
            for k in 0..j {
                s -= l[i * PARAMS + k] * l[j * PARAMS + k];
            }
            if i == j {
                l[i * PARAMS + i] = s.max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[i * PARAMS + j] = s / l[j * PARAMS + j];
            }
        }
    }
    let mut z = [0.0; PARAMS];
    for i in 0..PARAMS {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * PARAMS + k] * z[k];
        }
        z[i] = s / l[i * PARAMS + i];
    }
    let mut x = [0.0; PARAMS];
    for i in (0..PARAMS).rev() {
        let mut s = z[i];
        for k in i + 1..PARAMS {
            s -= l[k * PARAMS + i] * x[k];
        }
        x[i] = s / l[i * PARAMS + i];
    }
    x
}

/// Result of [`fit_matte`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub matte: EnvironmentMatte,
    /// Objective after every accepted step, plus the starting value of each
    /// level. Non-increasing within a level.
    pub trace: Vec<TracePoint>,
    /// Final finest-level objective.
    pub objective: f64,
}

fn pyramid_sizes(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![(h, w)];
    while sizes.len() < levels {
        let (ph, pw) = *sizes.last().unwrap();
        let (nh, nw) = (ph / 2, pw / 2);
        if nh < MIN_LEVEL_SIDE || nw < MIN_LEVEL_SIDE {
            break;
        }
        sizes.push((nh, nw));
    }
    sizes.reverse();
    sizes
}

/// Coarse pixel is fixed only when all fine pixels under it agree.
/// Binomial [1 2 1] prefilter with clamped borders, then 2x2 box reduction.
fn pyramid_down(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let tap = |a: f64, b: f64, c: f64| 0.25 * a + 0.5 * b + 0.25 * c;
    let rows = Image::from_fn(h, w, img.channels(), |x, y, c| {
        tap(
            img.get(x.saturating_sub(1), y, c),
            img.get(x, y, c),
            img.get((x + 1).min(w - 1), y, c),
        )
    });
    let smooth = Image::from_fn(h, w, img.channels(), |x, y, c| {
        tap(
            rows.get(x, y.saturating_sub(1), c),
            rows.get(x, y, c),
            rows.get(x, (y + 1).min(h - 1), c),
        )
    });
    smooth.downsample_half()
}

fn downsample_trimap(t: &Trimap, h: usize, w: usize) -> Trimap {
    let mut out = Trimap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let labels = [
                t.get(2 * x, 2 * y),
                t.get((2 * x + 1).min(t.width() - 1), 2 * y),
                t.get(2 * x, (2 * y + 1).min(t.height() - 1)),
                t.get(
                    (2 * x + 1).min(t.width() - 1),
                    (2 * y + 1).min(t.height() - 1),
                ),
            ];
            let first = labels[0];
            out.set(
                x,
                y,
                if labels.iter().all(|&l| l == first) {
                    first
                } else {
                    Trimap::UNKNOWN
                },
            );
        }
    }
    out
}

/// Damped Gauss-Newton system of one evaluation. With `freeze_flow` the
/// flow rows and columns are removed.
struct System<'a> {
    eval: &'a Evaluation,
    width: usize,
    shift: f64,
    freeze_flow: bool,
}

impl System<'_> {
    fn active(&self, k: usize) -> bool {
        !(self.freeze_flow && k < 2)
    }

    fn block(&self, i: usize) -> [f64; PARAMS * PARAMS] {
        let mut block = self.eval.blocks[i];
        for k in 0..PARAMS {
            block[k * PARAMS + k] += self.shift;
        }
        if self.freeze_flow {
            for k in 0..2 {
                for j in 0..PARAMS {
                    block[k * PARAMS + j] = 0.0;
                    block[j * PARAMS + k] = 0.0;
                }
                block[k * PARAMS + k] = 1.0;
            }
        }
        block
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (n, w) = (self.eval.blocks.len(), self.width);
        let mut out = vec![0.0; x.len()];
        out.par_chunks_exact_mut(PARAMS)
            .enumerate()
            .for_each(|(i, y)| {
                let block = self.block(i);
                let xi = &x[i * PARAMS..(i + 1) * PARAMS];
                for a in 0..PARAMS {
                    y[a] = (0..PARAMS).map(|b| block[a * PARAMS + b] * xi[b]).sum();
                }
                for k in (0..3).filter(|&k| self.active(k)) {
                    let mut acc = 0.0;
                    if i % w + 1 < w {
                        acc += self.eval.right[i][k] * x[(i + 1) * PARAMS + k];
                    }
                    if i % w > 0 {
                        acc += self.eval.right[i - 1][k] * x[(i - 1) * PARAMS + k];
                    }
                    if i + w < n {
                        acc += self.eval.down[i][k] * x[(i + w) * PARAMS + k];
                    }
                    if i >= w {
                        acc += self.eval.down[i - w][k] * x[(i - w) * PARAMS + k];
                    }
                    y[k] -= acc;
                }
            });
        out
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r.len()];
        out.par_chunks_exact_mut(PARAMS)
            .enumerate()
            .for_each(|(i, z)| {
                let g: [f64; PARAMS] = std::array::from_fn(|k| r[i * PARAMS + k]);
                z.copy_from_slice(&solve_spd(&self.block(i), &g));
            });
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Approximate Gauss-Newton step by block-preconditioned conjugate
/// gradients. Every iterate is a descent direction. With `freeze_flow` only
/// ρ and the logit move.
fn direction(current: &Evaluation, width: usize, damping: f64, freeze_flow: bool) -> Vec<f64> {
    let n = current.blocks.len();
    let system = System {
        eval: current,
        width,
        shift: damping / n as f64,
        freeze_flow,
    };
    let mut r: Vec<f64> = current.grad.iter().map(|g| -g).collect();
    if freeze_flow {
        for px in r.chunks_exact_mut(PARAMS) {
            px[0] = 0.0;
            px[1] = 0.0;
        }
    }
    let mut x = vec![0.0; r.len()];
    let mut z = system.precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let target = rz * CG_TOLERANCE * CG_TOLERANCE;
    for _ in 0..CG_ITERATIONS {
        if rz <= target || rz <= 0.0 {
            break;
        }
        let ap = system.apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for ((xv, rv), (pv, apv)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xv += alpha * pv;
            *rv -= alpha * apv;
        }
        z = system.precondition(&r);
        let next = dot(&r, &z);
        let beta = next / rz;
        rz = next;
        for (pv, zv) in p.iter_mut().zip(&z) {
            *pv = zv + beta * *pv;
        }
    }
    x
}

/// Backtracking Armijo search along `direction`. Returns the accepted point,
/// its value and the number of halvings.
fn line_search(
    problem: &FitProblem,
    params: &FitParams,
    current: &Evaluation,
    direction: &[f64],
    cfg: &FitConfig,
    trace: &[TracePoint],
) -> Result<Option<(FitParams, f64, usize)>> {
    let mut step = cfg.step_size;
    for halving in 0..MAX_HALVINGS {
        let mut trial = params.clone();
        for (v, d) in trial.values.iter_mut().zip(direction) {
            *v += step * d;
        }
        problem.project(&mut trial.values);
        let value = problem.objective(&trial);
        if !value.is_finite() {
            return Err(MatteError::Diverged {
                trace: trace.to_vec(),
            });
        }
        let predicted: f64 = trial
            .values
            .iter()
            .zip(&params.values)
            .zip(&current.grad)
            .map(|((a, b), g)| g * (a - b))
            .sum();
        if value <= current.value && value <= current.value + ARMIJO_C * predicted {
            return Ok(Some((trial, value, halving)));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Minimize the level objective from `params`, appending to `trace`.
///
/// Bilinear sampling makes the objective non-differentiable on the pixel
/// lattice, where full steps get cut short. A failed or shortened full step
/// is followed by a step with the flow frozen.
fn descend(
    problem: &FitProblem,
    mut params: FitParams,
    level: usize,
    cfg: &FitConfig,
    trace: &mut Vec<TracePoint>,
) -> Result<(FitParams, f64)> {
    // separate damping for full and flow-frozen steps
    let mut damping = [1e-3, 1e-3];
    let mut current = problem.evaluate(&params, true);
    if !current.value.is_finite() {
        return Err(MatteError::Diverged {
            trace: trace.clone(),
        });
    }
    trace.push(TracePoint {
        iteration: 0,
        level,
        objective: current.value,
    });
    let mut freeze_next = false;
    for iteration in 1..=cfg.iterations_per_level {
        let mut frozen = freeze_next;
        let dir = direction(
            &current,
            problem.width(),
            damping[usize::from(frozen)],
            frozen,
        );
        let mut accepted = line_search(problem, &params, &current, &dir, cfg, trace)?;
        if accepted.is_none() && !frozen {
            frozen = true;
            let dir = direction(&current, problem.width(), damping[1], true);
            accepted = line_search(problem, &params, &current, &dir, cfg, trace)?;
        }
        let Some((trial, value, halvings)) = accepted else {
            break;
        };
        let d = &mut damping[usize::from(frozen)];
        *d = if halvings == 0 {
            (*d / 3.0).max(1e-9)
        } else {
            (*d * 4.0).min(1e6)
        };
        // a cut full step usually means the flow sits near the lattice
        freeze_next = !frozen && halvings > 0;
        let previous = current.value;
        params = trial;
        current = problem.evaluate(&params, true);
        debug_assert_eq!(current.value, value);
        trace.push(TracePoint {
            iteration,
            level,
            objective: current.value,
        });
        if previous - current.value <= cfg.convergence_tol * previous.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok((params, current.value))
}

/// Run the descent on a single problem from `init`, returning the final
/// parameters, objective, and trace (all at level 0).
pub fn refine(
    problem: &FitProblem,
    mut init: FitParams,
    cfg: &FitConfig,
) -> Result<(FitParams, f64, Vec<TracePoint>)> {
    cfg.validate()?;
    if init.height != problem.height() || init.width != problem.width() {
        return Err(MatteError::shape(
            "initial parameters do not match the problem",
        ));
    }
    problem.project(&mut init.values);
    let mut trace = Vec::new();
    let (params, objective) = descend(problem, init, 0, cfg, &mut trace)?;
    Ok((params, objective, trace))
}

/// Fit a matte so that compositing it over `background` reproduces `input`.
///
/// With a trimap, foreground pixels are held at mask 1 and background pixels
/// at mask 0. On textureless backgrounds the flow is unidentifiable and the
/// result is the smoothest (constant) flow.
pub fn fit_matte(
    input: &Image,
    background: &Image,
    trimap: Option<&Trimap>,
    cfg: &FitConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    if !input.same_size(background) || input.channels() != background.channels() {
        return Err(MatteError::shape(
            "fit_matte: input and background differ in shape",
        ));
    }
    if let Some(t) = trimap {
        if t.height() != input.height() || t.width() != input.width() {
            return Err(MatteError::shape("fit_matte: trimap does not match input"));
        }
    }
    let sizes = pyramid_sizes(input.height(), input.width(), cfg.pyramid_levels);

    // finest first, then reversed to coarse-to-fine
    let mut inputs = vec![input.clone()];
    let mut backgrounds = vec![background.clone()];
    let mut trimaps = vec![trimap.cloned()];
    for &(h, w) in sizes.iter().rev().skip(1) {
        let next_in = pyramid_down(inputs.last().unwrap());
        let next_bg = pyramid_down(backgrounds.last().unwrap());
        debug_assert_eq!((next_in.height(), next_in.width()), (h, w));
        let next_tri = trimaps
            .last()
            .unwrap()
            .as_ref()
            .map(|t| downsample_trimap(t, h, w));
        inputs.push(next_in);
        backgrounds.push(next_bg);
        trimaps.push(next_tri);
    }
    inputs.reverse();
    backgrounds.reverse();
    trimaps.reverse();

    let (h0, w0) = sizes[0];
    let mut params = FitParams::jittered(h0, w0, cfg.init_jitter, cfg.seed);

    let mut trace = Vec::new();
    let mut objective = f64::NAN;
    let mut last_problem = None;
    for (level, &(h, w)) in sizes.iter().enumerate() {
        if params.height != h || params.width != w {
            params = params.upsample(h, w);
        }
        let scale = COARSE_TV_SCALE.powi((sizes.len() - 1 - level) as i32);
        let level_cfg = FitConfig {
            tv_weight_flow: cfg.tv_weight_flow * scale,
            tv_weight_rho: cfg.tv_weight_rho * scale,
            ..cfg.clone()
        };
        let problem = FitProblem::new(
            inputs[level].clone(),
            backgrounds[level].clone(),
            trimaps[level].as_ref(),
            &level_cfg,
        )?;
        problem.project(&mut params.values);
        let (p, obj) = descend(&problem, params, level, cfg, &mut trace)?;
        params = p;
        objective = obj;
        last_problem = Some(problem);
    }
    let problem = last_problem.expect("at least one level");
    Ok(FitOutput {
        matte: problem.to_matte(&params),
        trace,
        objective,
    })
}

/// Objective trace as CSV with header `iteration,level,objective`.
pub fn trace_to_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("iteration,level,objective\n");
    for t in trace {
        let _ = writeln!(out, "{},{},{:e}", t.iteration, t.level, t.objective);
    }
    out
}
