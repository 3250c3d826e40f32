#![allow(dead_code)]

use envmatte::{EnvironmentMatte, FlowField, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded RGB noise smoothed by `passes` of a [1 2 1] filter.
pub fn texture(height: usize, width: usize, seed: u64, passes: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::from_fn(height, width, 3, |_, _, _| rng.gen::<f64>());
    for _ in 0..passes {
        let src = img.clone();
        let at = |x: isize, y: isize, c: usize| {
            let x = x.clamp(0, width as isize - 1) as usize;
            let y = y.clamp(0, height as isize - 1) as usize;
            src.get(x, y, c)
        };
        img = Image::from_fn(height, width, 3, |x, y, c| {
            let (x, y) = (x as isize, y as isize);
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let w = [1.0, 2.0, 1.0][(dx + 1) as usize] * [1.0, 2.0, 1.0][(dy + 1) as usize];
                    acc += w * at(x + dx, y + dy, c);
                }
            }
            acc / 16.0
        });
    }
    img
}

/// Union of a few random disks.
pub fn blob_mask(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Image {
    let blobs: Vec<(f64, f64, f64)> = (0..rng.gen_range(2..=5))
        .map(|_| {
            (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(2.0..(width.min(height) as f64 / 4.0).max(3.0)),
            )
        })
        .collect();
    Image::from_fn(height, width, 1, |x, y, _| {
        let inside = blobs
            .iter()
            .any(|&(cx, cy, r)| (x as f64 - cx).hypot(y as f64 - cy) <= r);
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

/// Random blob matte with integer flows of at most `max_flow` per component
/// whose targets stay inside the image, and uniform attenuation in `rho`.
pub fn blob_matte(
    height: usize,
    width: usize,
    max_flow: i64,
    rho: (f64, f64),
    seed: u64,
) -> EnvironmentMatte {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = blob_mask(height, width, &mut rng);
    let flow_field = FlowField::from_fn(height, width, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let dx = rng
            .gen_range(-max_flow..=max_flow)
            .clamp(-x, width as i64 - 1 - x);
        let dy = rng
            .gen_range(-max_flow..=max_flow)
            .clamp(-y, height as i64 - 1 - y);
        [dx as f64, dy as f64]
    });
    let mut flow = flow_field;
    flow.restrict_to(&mask);
    let attenuation = Image::from_fn(height, width, 1, |x, y, _| {
        let r = rng.gen_range(rho.0..=rho.1);
        if mask.get(x, y, 0) > 0.5 {
            r
        } else {
            1.0
        }
    });
    EnvironmentMatte::new(mask, attenuation, flow).unwrap()
}

/// Bit-level equality of two images.
pub fn bits_equal(a: &Image, b: &Image) -> bool {
    a.same_size(b)
        && a.channels() == b.channels()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn mattes_bits_equal(a: &EnvironmentMatte, b: &EnvironmentMatte) -> bool {
    bits_equal(&a.mask, &b.mask)
        && bits_equal(&a.attenuation, &b.attenuation)
        && a.flow.valid_mask() == b.flow.valid_mask()
        && a.flow
            .data()
            .iter()
            .zip(b.flow.data())
            .all(|(x, y)| x[0].to_bits() == y[0].to_bits() && x[1].to_bits() == y[1].to_bits())
}
