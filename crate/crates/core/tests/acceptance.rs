//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::time::{Duration, Instant};

use envmatte::datagen::{self, AugmentConfig, TestMatteKind, TestMatteSpec, TrimapMode};
use envmatte::editor::{self, Similarity};
use envmatte::fitter::{FitParams, FitProblem};
use envmatte::graycode;
use envmatte::io;
use envmatte::losses::{self, LossWeights};
use envmatte::metrics;
use envmatte::{compose, fit_matte, EnvironmentMatte, FitConfig, FlowField, Image, Trimap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
}

fn graycode_round_trip() -> Outcome {
    let start = Instant::now();
    let patterns = graycode::generate_patterns(128, 128).map_err(|e| e.to_string())?;
    let mut worst_rho = 0.0f64;
    for seed in 0..20 {
        let gt = common::blob_matte(128, 128, 16, (0.3, 1.0), seed);
        let stack = graycode::render_stack(&gt, &patterns)
            .map_err(|e| e.to_string())?
            .map_captures(graycode::quantize8);
        let dec = graycode::decode_stack(&stack).map_err(|e| e.to_string())?;
        let epe = metrics::epe(&dec.flow, &gt.flow, &gt.mask).map_err(|e| e.to_string())?;
        check(
            epe.whole_image == 0.0,
            format!("seed {seed}: flow EPE {}", epe.whole_image),
        )?;
        check(
            dec.flow.valid_mask() == gt.flow.valid_mask(),
            format!("seed {seed}: flow validity differs"),
        )?;
        let iou = metrics::iou(&dec.mask, &gt.mask).map_err(|e| e.to_string())?;
        check(iou == 1.0, format!("seed {seed}: IoU {iou}"))?;
        for (a, b) in dec.attenuation.data().iter().zip(gt.attenuation.data()) {
            worst_rho = worst_rho.max((a - b).abs());
        }
    }
    check(
        worst_rho <= 2.0 / 255.0,
        format!("attenuation error {worst_rho}"),
    )?;
    let elapsed = start.elapsed();
    check(
        elapsed <= Duration::from_secs(10),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "20 mattes, EPE 0, IoU 1, max attenuation error {:.2}/255, {:.2?}",
        worst_rho * 255.0,
        elapsed
    ))
}

/// Random 8x8 problem and parameter point.
fn random_problem(rng: &mut ChaCha8Rng) -> (FitProblem, FitParams) {
    let seed = rng.gen();
    let input = common::texture(8, 8, seed, 1);
    let background = common::texture(8, 8, seed ^ 0x5555, 1);
    let labels = (0..64).map(|_| rng.gen_range(0..=2u8)).collect();
    let trimap = Trimap::from_labels(8, 8, labels).unwrap();
    let cfg = FitConfig {
        tv_weight_flow: rng.gen_range(0.0..1e-2),
        tv_weight_rho: rng.gen_range(0.0..1e-2),
        mask_prior: rng.gen_range(0.0..1e-3),
        mask_sharpness: rng.gen_range(0.5..2.0),
        ..FitConfig::default()
    };
    let use_trimap = rng.gen_bool(0.5);
    let problem = FitProblem::new(input, background, use_trimap.then_some(&trimap), &cfg).unwrap();
    let mut params = FitParams::initial(8, 8);
    for px in params.values.chunks_exact_mut(4) {
        px[0] = rng.gen_range(-3.0..3.0);
        px[1] = rng.gen_range(-3.0..3.0);
        px[2] = rng.gen_range(0.0..1.0);
        px[3] = rng.gen_range(-3.0..3.0);
    }
    (problem, params)
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let points = 1000;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let (problem, params) = random_problem(&mut rng);
        let (_, grad) = problem.gradient(&params);
        let dir: Vec<f64> = (0..params.values.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let shifted = |s: f64| {
            let mut p = params.clone();
            for (v, d) in p.values.iter_mut().zip(&dir) {
                *v += s * d;
            }
            problem.objective(&p)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    check(worst <= 1e-4, format!("max relative error {worst:.3e}"))?;
    Ok(format!(
        "{points} random points on 8x8 problems, max relative error {worst:.2e}"
    ))
}

fn fitter_recovery() -> Outcome {
    let background = common::texture(64, 64, 7, 2);
    let mut spec = TestMatteSpec::new(TestMatteKind::Radial { k: -0.15 }, 64, 64);
    spec.rho = 0.9;
    let gt = datagen::gen_test_matte(&spec).map_err(|e| e.to_string())?;
    check(
        gt.flow.max_magnitude() <= 8.0,
        "ground-truth flow exceeds 8 px",
    )?;
    let input = compose(&gt, &background).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = pool(1)
        .install(|| fit_matte(&input, &background, None, &FitConfig::default()))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let epe = metrics::epe(&out.matte.flow, &gt.flow, &gt.mask).map_err(|e| e.to_string())?;
    let region = epe.object_region.unwrap();
    let rho_err = out
        .matte
        .attenuation
        .data()
        .iter()
        .map(|r| (r - 0.9).abs())
        .sum::<f64>()
        / (64.0 * 64.0);
    let recon = compose(&out.matte, &background).map_err(|e| e.to_string())?;
    let i_mse = metrics::mse(&recon, &input).map_err(|e| e.to_string())?;
    let monotone = out
        .trace
        .windows(2)
        .all(|w| w[0].level != w[1].level || w[1].objective <= w[0].objective);
    let summary = format!(
        "EPE {region:.3} px, mean |rho-0.9| {rho_err:.4}, I-MSE {i_mse:.2e}, {} steps, {elapsed:.2?}",
        out.trace.len()
    );
    check(region <= 0.5, format!("EPE too high: {summary}"))?;
    check(
        rho_err <= 0.02,
        format!("attenuation error too high: {summary}"),
    )?;
    check(
        i_mse <= 1e-4,
        format!("reconstruction error too high: {summary}"),
    )?;
    check(monotone, "objective increased within a pyramid level")?;
    check(
        elapsed <= Duration::from_secs(60),
        format!("too slow: {summary}"),
    )?;
    Ok(summary)
}

fn loss_constants() -> Outcome {
    let w = LossWeights::default();
    let total = losses::coarse_total(1.0, 1.0, 1.0, 1.0, &w);
    check(total == 2.11, format!("coarse total {total:?}"))?;
    check(
        w.scale_weights == [0.125, 0.25, 0.5, 1.0],
        format!("scale weights {:?}", w.scale_weights),
    )?;
    check(
        (w.r_ar, w.r_fr) == (1.0, 1.0),
        "refine weights differ from (1, 1)",
    )?;
    let pred = FlowField::constant(6, 5, 3.0, 4.0);
    let gt = FlowField::constant(6, 5, 0.0, 0.0);
    let fl = losses::flow_loss(&pred, &gt).map_err(|e| e.to_string())?;
    check((fl - 5.0).abs() <= 1e-12, format!("flow loss {fl}"))?;
    let ml = losses::mask_loss(
        &Image::filled(4, 4, 1, 0.5),
        &Image::from_fn(4, 4, 1, |x, _, _| (x % 2) as f64),
    )
    .map_err(|e| e.to_string())?;
    check(
        (ml - std::f64::consts::LN_2).abs() <= 1e-12,
        format!("mask loss {ml}"),
    )?;
    Ok(format!(
        "coarse total {total}, scale weights (1/8,1/4,1/2,1), flow loss 5, mask loss ln 2"
    ))
}

fn metric_sanity() -> Outcome {
    let x = common::texture(24, 24, 11, 1);
    let s = metrics::ssim(&x, &x).map_err(|e| e.to_string())?;
    check((s - 1.0).abs() <= 1e-9, format!("ssim(x,x) = {s}"))?;
    let a = Image::filled(4, 4, 3, 0.2);
    let b = Image::filled(4, 4, 3, 0.3);
    let mse = metrics::mse(&a, &b).map_err(|e| e.to_string())?;
    let p = metrics::psnr(&a, &b, 1.0).map_err(|e| e.to_string())?;
    check(
        (mse - 0.01).abs() < 1e-15 && (p - 20.0).abs() <= 1e-9,
        format!("psnr {p} at mse {mse}"),
    )?;
    let left = Image::from_fn(4, 6, 1, |x, _, _| if x < 3 { 1.0 } else { 0.0 });
    let right = left.map(|v| 1.0 - v);
    let ious = [
        metrics::iou(&left, &left).unwrap(),
        metrics::iou(&left, &right).unwrap(),
        metrics::iou(&left, &Image::filled(4, 6, 1, 1.0)).unwrap(),
        metrics::iou(&Image::new(4, 6, 1), &Image::new(4, 6, 1)).unwrap(),
    ];
    check(
        ious == [1.0, 0.0, 0.5, 1.0],
        format!("iou identities {ious:?}"),
    )?;
    let gt = FlowField::constant(4, 4, 1.0, -2.0);
    let mask = Image::from_fn(4, 4, 1, |x, _, _| if x < 2 { 1.0 } else { 0.0 });
    let cases = [
        (gt.clone(), (0.0, 0.0)),
        (FlowField::constant(4, 4, 4.0, 2.0), (5.0, 5.0)),
        (
            FlowField::from_fn(4, 4, |x, _| if x < 2 { [4.0, 2.0] } else { [1.0, -2.0] }),
            (2.5, 5.0),
        ),
    ];
    for (pred, (whole, region)) in cases {
        let r = metrics::epe(&pred, &gt, &mask).map_err(|e| e.to_string())?;
        check(
            r.whole_image == whole && r.object_region == Some(region),
            format!("epe {r:?}, expected ({whole}, {region})"),
        )?;
    }
    Ok("ssim(x,x)=1, psnr 20 dB at mse 0.01, iou identities, EPE whole/region split".into())
}

fn editing_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = common::blob_matte(48, 40, 6, (0.3, 1.0), 5);
    // flows on a 1/64 grid and factors on a 1/8 grid keep every product exact
    let matte = EnvironmentMatte {
        flow: FlowField::from_parts(
            48,
            40,
            base.flow
                .data()
                .iter()
                .map(|v| [v[0] + 0.015625 * 3.0, v[1] - 0.5])
                .collect(),
            base.flow.valid_mask().to_vec(),
        )
        .unwrap(),
        ..base.clone()
    };
    for _ in 0..50 {
        let a = rng.gen_range(0..=32) as f64 / 8.0;
        let b = rng.gen_range(0..=32) as f64 / 8.0;
        let twice = editor::scale_flow(&editor::scale_flow(&matte, a).unwrap(), b).unwrap();
        let once = editor::scale_flow(&matte, a * b).unwrap();
        check(
            common::mattes_bits_equal(&twice, &once),
            format!("composition law fails for {a}, {b}"),
        )?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    io::write_bundle(dir.path().join("a"), &matte, false).map_err(|e| e.to_string())?;
    io::write_bundle(
        dir.path().join("b"),
        &editor::scale_flow(&matte, 1.0).unwrap(),
        false,
    )
    .map_err(|e| e.to_string())?;
    for name in [
        io::MASK_FILE,
        io::RHO_FILE,
        io::FLOW_FILE,
        io::MANIFEST_FILE,
    ] {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        check(x == y, format!("factor-1 edit changed {name}"))?;
    }
    let (tx, ty) = (5.0, -3.0);
    let there = editor::transform_matte(&matte, &Similarity::translation(tx, ty), true).unwrap();
    let back = editor::transform_matte(&there, &Similarity::translation(-tx, -ty), true).unwrap();
    for y in 3..45 {
        for x in 5..35 {
            let same = back.mask.get(x, y, 0) == matte.mask.get(x, y, 0)
                && back.attenuation.get(x, y, 0) == matte.attenuation.get(x, y, 0)
                && back.flow.is_valid(x, y) == matte.flow.is_valid(x, y)
                && back.flow.get(x, y) == matte.flow.get(x, y);
            check(
                same,
                format!("translation round trip differs at ({x}, {y})"),
            )?;
        }
    }
    Ok(
        "composition law exact, factor-1 bundle byte-identical, translate (5,-3) round trip exact"
            .into(),
    )
}

fn determinism() -> Outcome {
    let background = common::texture(32, 32, 3, 2);
    let gt = common::blob_matte(32, 32, 2, (0.6, 0.9), 4);
    let input = compose(&gt, &background).map_err(|e| e.to_string())?;
    let cfg = FitConfig {
        iterations_per_level: 40,
        seed: 9,
        ..FitConfig::default()
    };
    let trimap = datagen::gen_trimap(&gt.mask, &TrimapMode::Fixed { kernel: 2 });
    let run = |threads: usize| {
        pool(threads).install(|| {
            let fit = fit_matte(&input, &background, Some(&trimap), &cfg).unwrap();
            let aug = datagen::augment(
                &background,
                &gt,
                &AugmentConfig {
                    crop: 24,
                    ..AugmentConfig::coarse(17)
                },
            )
            .unwrap();
            let tri = datagen::gen_trimap(&gt.mask, &TrimapMode::random(23));
            (fit, aug, tri)
        })
    };
    let reference = run(1);
    for threads in [1, 8, 8] {
        let other = run(threads);
        check(
            common::mattes_bits_equal(&reference.0.matte, &other.0.matte)
                && reference.0.trace == other.0.trace,
            format!("fit differs with {threads} threads"),
        )?;
        check(
            common::bits_equal(&reference.1 .0, &other.1 .0)
                && common::mattes_bits_equal(&reference.1 .1, &other.1 .1),
            format!("augment differs with {threads} threads"),
        )?;
        check(
            reference.2 == other.2,
            format!("random trimap differs with {threads} threads"),
        )?;
    }
    Ok("fit, augment and random trimap bit-identical across runs and 1 vs 8 threads".into())
}

fn format_conformance() -> Outcome {
    let bytes = io::encode_flow(&FlowField::constant(1, 1, 0.0, 0.0));
    check(
        bytes.len() == 20,
        format!("1x1 file is {} bytes", bytes.len()),
    )?;
    let magic = 202021.25f32.to_le_bytes();
    check(
        bytes[..4] == magic,
        format!("magic bytes {:02x?}", &bytes[..4]),
    )?;
    check(bytes[..4] == [0x50, 0x49, 0x45, 0x48], "magic is not PIEH")?;
    check(bytes[4..12] == [1, 0, 0, 0, 1, 0, 0, 0], "dimension fields")?;
    check(bytes[12..].iter().all(|&b| b == 0), "payload not zero")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..3 {
        let mut matte = common::blob_matte(40, 56, 10, (0.0, 1.0), 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        matte.flow = FlowField::from_parts(
            40,
            56,
            matte
                .flow
                .data()
                .iter()
                .map(|v| [v[0] + rng.gen_range(-0.5..0.5), v[1] * 0.3])
                .collect(),
            matte.flow.valid_mask().to_vec(),
        )
        .unwrap();
        let path = dir.path().join(format!("m{seed}"));
        io::write_bundle(&path, &matte, false).map_err(|e| e.to_string())?;
        let back = io::read_bundle(&path).map_err(|e| e.to_string())?;
        check(back.mask == matte.mask, "mask not preserved exactly")?;
        let rho_err = back
            .attenuation
            .data()
            .iter()
            .zip(matte.attenuation.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        check(
            rho_err <= 1.0 / 65535.0,
            format!("attenuation error {rho_err}"),
        )?;
        check(
            back.flow.valid_mask() == matte.flow.valid_mask(),
            "flow validity",
        )?;
        for (a, b) in back.flow.data().iter().zip(matte.flow.data()) {
            check(
                a[0] == b[0] as f32 as f64 && a[1] == b[1] as f32 as f64,
                "flow not preserved to 32-bit rounding",
            )?;
        }
    }
    Ok(
        "1x1 zero flow is 20 bytes starting 50 49 45 48 (202021.25 LE); 3 bundle round trips"
            .into(),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("Gray-code round trip", graycode_round_trip),
        ("gradient correctness", gradient_check),
        ("fitter recovery", fitter_recovery),
        ("loss constants", loss_constants),
        ("metric sanity", metric_sanity),
        ("editing identities", editing_identities),
        ("determinism", determinism),
        ("format conformance", format_conformance),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
