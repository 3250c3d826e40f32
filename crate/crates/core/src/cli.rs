//! Command-line interface. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::datagen::{self, AugmentConfig, TestMatteKind, TestMatteSpec, TrimapMode};
use crate::editor::{self, Similarity};
use crate::error::{MatteError, Result};
use crate::fitter::{self, FitConfig};
use crate::graycode;
use crate::io::{self, BitDepth};
use crate::matte::{compose, compose_colored};
use crate::metrics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "envmatte",
    version,
    about = "Refractive environment matting toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Composite a matte bundle over a background image
    Compose {
        #[arg(long)]
        matte: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the per-channel attenuation and specular planes
        #[arg(long)]
        colored: bool,
    },
    /// Write the Gray-code pattern stack for a pattern space
    Patterns {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a captured Gray-code stack into a matte bundle
    Extract {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a matte to an (input, background) pair
    Fit(FitArgs),
    /// Compare a predicted matte with ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, requires = "input")]
        background: Option<PathBuf>,
        #[arg(long, requires = "background")]
        input: Option<PathBuf>,
    },
    /// Edit a matte bundle
    Edit(EditArgs),
    /// Generate a trimap from a mask image
    Trimap {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        fixed_kernel: Option<usize>,
        #[arg(long, requires = "seed")]
        random: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded augmentation of an (image, matte) pair
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        matte: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Square crop size [default: min(448, smallest side after scaling)]
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an analytic test matte
    Gen {
        #[arg(long, value_parser = ["lens", "ripple", "constant"])]
        kind: String,
        /// Comma-separated key=value list (width, height, radius, cx, cy, rho,
        /// k, amplitude, wavelength, dx, dy)
        #[arg(long, default_value = "")]
        params: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    background: PathBuf,
    #[arg(long)]
    trimap: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tv_flow: Option<f64>,
    #[arg(long)]
    tv_rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the objective trace as CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("edit_op").required(true).args(["scale_flow", "translate", "rotate", "rescale"])))]
struct EditArgs {
    #[arg(long)]
    matte: PathBuf,
    #[arg(long)]
    scale_flow: Option<f64>,
    /// Translation in pixels as tx,ty
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    translate: Option<(f64, f64)>,
    /// Rotation in degrees
    #[arg(long, allow_hyphen_values = true)]
    rotate: Option<f64>,
    #[arg(long)]
    rescale: Option<f64>,
    /// Keep flow vectors as they are instead of rotating and scaling them
    #[arg(long)]
    no_cotransform: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or("expected two comma-separated numbers")?;
    let a = a
        .trim()
        .parse()
        .map_err(|_| format!("invalid number {a:?}"))?;
    let b = b
        .trim()
        .parse()
        .map_err(|_| format!("invalid number {b:?}"))?;
    Ok((a, b))
}

/// Exit code for a library error.
pub fn exit_code(err: &MatteError) -> i32 {
    match err {
        MatteError::InvalidArgument(_) => EXIT_USAGE,
        MatteError::Diverged { .. } => EXIT_DIVERGED,
        MatteError::Shape(_)
        | MatteError::Codec(_)
        | MatteError::Format { .. }
        | MatteError::Io { .. } => EXIT_IO,
    }
}

/// Parse `args` (including the program name) and run the command. Normal
/// output goes to `stdout`, diagnostics to standard error.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Compose {
            matte,
            background,
            out,
            colored,
        } => {
            let bundle = matte;
            let matte = io::read_bundle(&bundle)?;
            let (bg, depth) = io::read_image_with_depth(&background)?;
            let bg = if bg.height() != matte.height() || bg.width() != matte.width() {
                bg.resize_bilinear(matte.height(), matte.width())
            } else {
                bg
            };
            let result = if colored {
                if matte.color_attenuation.is_none() {
                    return Err(MatteError::format(&bundle, "bundle has no color planes"));
                }
                compose_colored(&matte, &bg)?
            } else {
                compose(&matte, &bg)?
            };
            io::write_image(&out, &result, depth)
        }
        Command::Patterns { width, height, out } => {
            let stack = graycode::generate_patterns(width, height)?;
            io::write_stack(&out, &stack)
        }
        Command::Extract { stack, out } => {
            let stack = io::read_stack(&stack)?;
            let matte = graycode::decode_stack(&stack)?;
            io::write_bundle(&out, &matte, false)
        }
        Command::Fit(args) => run_fit(args),
        Command::Eval {
            pred,
            gt,
            background,
            input,
        } => run_eval(&pred, &gt, background.as_deref(), input.as_deref(), stdout),
        Command::Edit(args) => run_edit(args),
        Command::Trimap {
            mask,
            fixed_kernel,
            random: _,
            seed,
            out,
        } => {
            let mask = io::read_image(&mask)?.to_luma();
            let mode = match fixed_kernel {
                Some(kernel) => TrimapMode::Fixed { kernel },
                None => TrimapMode::random(seed.unwrap_or(0)),
            };
            io::write_trimap(&out, &datagen::gen_trimap(&mask, &mode))
        }
        Command::Augment {
            image,
            matte,
            seed,
            crop,
            out,
        } => {
            let img = io::read_image(&image)?;
            let matte = io::read_bundle(&matte)?;
            let mut cfg = AugmentConfig::coarse(seed);
            cfg.crop = match crop {
                Some(c) => c,
                None => {
                    let side = img.height().min(img.width()) as f64 * cfg.scale_range.0;
                    (side.floor() as usize).clamp(1, 448)
                }
            };
            let (aug_img, aug_matte) = datagen::augment(&img, &matte, &cfg)?;
            io::write_bundle(&out, &aug_matte, false)?;
            io::write_image(out.join("image.png"), &aug_img, BitDepth::Eight)
        }
        Command::Gen { kind, params, out } => {
            let spec = gen_spec(&kind, &params)?;
            io::write_bundle(&out, &datagen::gen_test_matte(&spec)?, false)
        }
    }
}

fn run_fit(args: FitArgs) -> Result<()> {
    let input = io::read_image(&args.input)?;
    let background = io::read_image(&args.background)?;
    let trimap = args.trimap.as_ref().map(io::read_trimap).transpose()?;
    let mut cfg = FitConfig::default();
    if let Some(v) = args.levels {
        cfg.pyramid_levels = v;
    }
    if let Some(v) = args.iters {
        cfg.iterations_per_level = v;
    }
    if let Some(v) = args.tv_flow {
        cfg.tv_weight_flow = v;
    }
    if let Some(v) = args.tv_rho {
        cfg.tv_weight_rho = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let output = match fitter::fit_matte(&input, &background, trimap.as_ref(), &cfg) {
        Ok(o) => o,
        Err(MatteError::Diverged { trace }) => {
            if let Some(path) = &args.trace {
                io::write_atomic(path, fitter::trace_to_csv(&trace).as_bytes())?;
            }
            return Err(MatteError::Diverged { trace });
        }
        Err(e) => return Err(e),
    };
    io::write_bundle(&args.out, &output.matte, true)?;
    if let Some(path) = &args.trace {
        io::write_atomic(path, fitter::trace_to_csv(&output.trace).as_bytes())?;
    }
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn run_eval(
    pred: &Path,
    gt: &Path,
    background: Option<&Path>,
    input: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let pred = io::read_bundle(pred)?;
    let gt = io::read_bundle(gt)?;
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MatteError::shape(
            "predicted and ground-truth mattes differ in size",
        ));
    }
    let epe = metrics::epe(&pred.flow, &gt.flow, &gt.mask)?;
    let iou = metrics::iou(&pred.mask, &gt.mask)?;
    let a_mse = metrics::mse(&pred.attenuation, &gt.attenuation)?;
    let mut lines = vec![
        format!("F-EPE whole: {}", fmt_metric(epe.whole_image)),
        format!(
            "F-EPE region: {}",
            epe.object_region
                .map_or_else(|| "n/a".to_string(), fmt_metric)
        ),
        format!("M-IoU: {}", fmt_metric(iou)),
        format!("A-MSE (x1e-2): {}", fmt_metric(a_mse * 100.0)),
    ];
    if let (Some(bg), Some(input)) = (background, input) {
        let bg = io::read_image(bg)?;
        let (input, depth) = io::read_image_with_depth(input)?;
        // compare at the precision the input was stored with
        let recon = io::quantize(&editor::composite_new(&pred, &bg)?, depth);
        if recon.channels() != input.channels() || !recon.same_size(&input) {
            return Err(MatteError::shape(
                "input image does not match the reconstruction",
            ));
        }
        lines.push(format!(
            "I-MSE (x1e-2): {}",
            fmt_metric(metrics::mse(&recon, &input)? * 100.0)
        ));
        lines.push(format!(
            "PSNR: {}",
            fmt_metric(metrics::psnr(&recon, &input, 1.0)?)
        ));
        lines.push(format!(
            "SSIM: {}",
            fmt_metric(metrics::ssim(&recon, &input)?)
        ));
    }
    for line in lines {
        writeln!(stdout, "{line}").map_err(|e| MatteError::io("<stdout>", e))?;
    }
    Ok(())
}

fn run_edit(args: EditArgs) -> Result<()> {
    let matte = io::read_bundle(&args.matte)?;
    let cotransform = !args.no_cotransform;
    let edited = if let Some(f) = args.scale_flow {
        editor::scale_flow(&matte, f)?
    } else if let Some((tx, ty)) = args.translate {
        editor::transform_matte(&matte, &Similarity::translation(tx, ty), cotransform)?
    } else if let Some(deg) = args.rotate {
        editor::transform_matte(&matte, &Similarity::rotation(deg.to_radians()), cotransform)?
    } else if let Some(s) = args.rescale {
        editor::transform_matte(&matte, &Similarity::scaling(s), cotransform)?
    } else {
        unreachable!("clap requires one edit operation")
    };
    io::write_bundle(&args.out, &edited, false)
}

fn parse_params(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| MatteError::invalid(format!("expected key=value, got {item:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| MatteError::invalid(format!("{k}: invalid number {v:?}")))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

fn gen_spec(kind: &str, params: &str) -> Result<TestMatteSpec> {
    let mut p = parse_params(params)?;
    let mut take = |k: &str, default: f64| p.remove(k).unwrap_or(default);
    let size = |v: f64, name: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(MatteError::invalid(format!(
                "{name} must be a positive integer"
            )))
        }
    };
    let width = size(take("width", 64.0), "width")?;
    let height = size(take("height", 64.0), "height")?;
    let kind = match kind {
        "lens" => TestMatteKind::Radial { k: take("k", -0.1) },
        "ripple" => TestMatteKind::Ripple {
            amplitude: take("amplitude", 2.0),
            wavelength: take("wavelength", 16.0),
        },
        "constant" => TestMatteKind::Constant {
            dx: take("dx", 2.0),
            dy: take("dy", 0.0),
        },
        other => return Err(MatteError::invalid(format!("unknown kind {other}"))),
    };
    let mut spec = TestMatteSpec::new(kind, height, width);
    spec.rho = take("rho", 1.0);
    let radius = take("radius", f64::NAN);
    spec.radius = (!radius.is_nan()).then_some(radius);
    let (cx, cy) = (take("cx", f64::NAN), take("cy", f64::NAN));
    if cx.is_nan() != cy.is_nan() {
        return Err(MatteError::invalid("cx and cy must be given together"));
    }
    spec.center = (!cx.is_nan()).then_some((cx, cy));
    if let Some(unknown) = p.keys().next() {
        return Err(MatteError::invalid(format!("unknown parameter {unknown}")));
    }
    Ok(spec)
}

/// Apply the `THREADS` environment variable to the global worker pool.
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
