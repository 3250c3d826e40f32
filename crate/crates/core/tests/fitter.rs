mod common;

use envmatte::datagen::{gen_test_matte, TestMatteKind, TestMatteSpec};
use envmatte::fitter::{refine, trace_to_csv, FitParams, FitProblem};
use envmatte::{
    compose, fit_matte, EnvironmentMatte, FitConfig, FlowField, Image, MatteError, Trimap,
};

#[test]
fn single_free_pixel_reaches_a_local_minimum() {
    let bg = common::texture(8, 8, 21, 1);
    let mut labels = vec![Trimap::BACKGROUND; 64];
    labels[3 * 8 + 4] = Trimap::FOREGROUND;
    let trimap = Trimap::from_labels(8, 8, labels).unwrap();
    let gt = EnvironmentMatte::new(
        Image::from_fn(8, 8, 1, |x, y, _| if (x, y) == (4, 3) { 1.0 } else { 0.0 }),
        Image::filled(8, 8, 1, 0.8),
        FlowField::constant(8, 8, 1.3, -0.6),
    )
    .unwrap();
    let input = compose(&gt, &bg).unwrap();
    let cfg = FitConfig {
        tv_weight_flow: 0.0,
        tv_weight_rho: 0.0,
        iterations_per_level: 200,
        ..FitConfig::default()
    };
    let problem = FitProblem::new(input, bg, Some(&trimap), &cfg).unwrap();
    let (found, value, _) = refine(&problem, FitParams::jittered(8, 8, 1e-2, 0), &cfg).unwrap();
    let i = (3 * 8 + 4) * 4;
    let (fx, fy) = (found.values[i], found.values[i + 1]);
    let mut best = f64::INFINITY;
    for a in -50..=50 {
        for b in -50..=50 {
            let mut p = found.clone();
            p.values[i] = fx + a as f64 * 0.01;
            p.values[i + 1] = fy + b as f64 * 0.01;
            best = best.min(problem.objective(&p));
        }
    }
    assert!(value <= best + 1e-12, "fit {value:e}, grid {best:e}");
}

#[test]
fn translation_equivariance() {
    // an 8 px shift keeps all four pyramid levels aligned
    let (h, w, shift) = (64, 72, 8);
    let bg = common::texture(h, w, 5, 2);
    let mut spec = TestMatteSpec::new(TestMatteKind::Radial { k: -0.1 }, h, w);
    spec.rho = 0.85;
    let gt = gen_test_matte(&spec).unwrap();
    let input = compose(&gt, &bg).unwrap();
    let cw = w - shift;
    let fit_at = |x0: usize| {
        let i = input.crop(x0, 0, h, cw).unwrap();
        let b = bg.crop(x0, 0, h, cw).unwrap();
        fit_matte(&i, &b, None, &FitConfig::default())
            .unwrap()
            .matte
    };
    let a = fit_at(0);
    let b = fit_at(shift);
    let border = 8;
    let mut diff = 0.0;
    let mut n = 0;
    for y in border..h - border {
        for x in shift + border..cw - border {
            let (va, vb) = (a.flow.get(x, y), b.flow.get(x - shift, y));
            diff += (va[0] - vb[0]).hypot(va[1] - vb[1]);
            n += 1;
        }
    }
    let mean = diff / n as f64;
    assert!(mean < 0.05, "mean interior flow difference {mean}");
}

#[test]
fn input_equal_to_background_gives_empty_mask() {
    let bg = common::texture(32, 32, 8, 1);
    let out = fit_matte(&bg, &bg, None, &FitConfig::default()).unwrap();
    assert!(
        out.matte.mask.mean() <= 0.01,
        "mask mean {}",
        out.matte.mask.mean()
    );
    assert!(out.objective <= 1e-6, "objective {}", out.objective);
}

#[test]
fn textureless_background_yields_constant_flow() {
    let bg = Image::filled(16, 16, 3, 0.5);
    let gt = EnvironmentMatte::new(
        Image::filled(16, 16, 1, 1.0),
        Image::filled(16, 16, 1, 0.7),
        FlowField::constant(16, 16, 2.0, 1.0),
    )
    .unwrap();
    let input = compose(&gt, &bg).unwrap();
    let trimap = Trimap::from_labels(16, 16, vec![Trimap::FOREGROUND; 256]).unwrap();
    let out = fit_matte(&input, &bg, Some(&trimap), &FitConfig::default()).unwrap();
    let first = out.matte.flow.get(0, 0);
    for v in out.matte.flow.data() {
        assert!((v[0] - first[0]).abs() < 1e-9 && (v[1] - first[1]).abs() < 1e-9);
    }
    for r in out.matte.attenuation.data() {
        assert!((r - 0.7).abs() < 1e-3, "rho {r}");
    }
}

#[test]
fn fixed_trimap_pixels_are_honored() {
    let bg = common::texture(16, 16, 2, 1);
    let gt = common::blob_matte(16, 16, 2, (0.7, 0.9), 3);
    let input = compose(&gt, &bg).unwrap();
    let labels = (0..256)
        .map(|i| {
            if i % 16 < 4 {
                Trimap::BACKGROUND
            } else if i % 16 > 11 {
                Trimap::FOREGROUND
            } else {
                Trimap::UNKNOWN
            }
        })
        .collect();
    let trimap = Trimap::from_labels(16, 16, labels).unwrap();
    let cfg = FitConfig {
        pyramid_levels: 2,
        iterations_per_level: 30,
        ..FitConfig::default()
    };
    let out = fit_matte(&input, &bg, Some(&trimap), &cfg).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let m = out.matte.mask.get(x, y, 0);
            if x < 4 {
                assert_eq!(m, 0.0);
            } else if x > 11 {
                assert_eq!(m, 1.0);
            }
        }
    }
}

#[test]
fn trace_is_monotone_per_level_and_serializes() {
    let bg = common::texture(32, 32, 4, 1);
    let gt = common::blob_matte(32, 32, 3, (0.5, 1.0), 8);
    let input = compose(&gt, &bg).unwrap();
    let cfg = FitConfig {
        iterations_per_level: 25,
        ..FitConfig::default()
    };
    let out = fit_matte(&input, &bg, None, &cfg).unwrap();
    let levels: Vec<usize> = out.trace.iter().map(|t| t.level).collect();
    assert!(levels.windows(2).all(|w| w[1] >= w[0]));
    assert!(out
        .trace
        .windows(2)
        .all(|w| w[0].level != w[1].level || w[1].objective <= w[0].objective));
    let csv = trace_to_csv(&out.trace);
    assert!(csv.starts_with("iteration,level,objective\n"));
    assert_eq!(csv.lines().count(), out.trace.len() + 1);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = Image::new(8, 8, 3);
    let b = Image::new(8, 9, 3);
    assert!(matches!(
        fit_matte(&a, &b, None, &FitConfig::default()),
        Err(MatteError::Shape(_))
    ));
    let bad = FitConfig {
        iterations_per_level: 0,
        pyramid_levels: 0,
        ..FitConfig::default()
    };
    assert!(fit_matte(&a, &a, None, &bad).is_err());
}
